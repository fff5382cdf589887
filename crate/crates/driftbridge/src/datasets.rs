//! Snapshot datasets: synthetic benchmark generators, CSV ingestion with the
//! `t,x1..xd[,v1..vd]` schema, train/val/test splitting, and multi-marginal
//! assembly with held-out interior marginals.
//!
//! Trainers receive marginals through [`MultiMarginalDataset::training_marginals`],
//! which never exposes held-out snapshots — the accessor is the enforcement
//! point for the evaluation protocol.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fields::{ReferenceField, Weighting};
use crate::numkit::Matrix;
use crate::rng;

/// Row-level split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// A time-labeled particle population, optionally with per-particle reference
/// velocities.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    positions: Matrix,
    velocities: Option<Matrix>,
    split: Vec<SplitTag>,
}

impl Snapshot {
    pub fn new(time: f64, positions: Matrix, velocities: Option<Matrix>) -> Result<Self> {
        if !time.is_finite() {
            return Err(Error::config("time", "snapshot time must be finite"));
        }
        if let Some(v) = &velocities {
            if v.rows() != positions.rows() || v.cols() != positions.cols() {
                return Err(Error::dimension(format!(
                    "velocities {}x{} do not match positions {}x{}",
                    v.rows(),
                    v.cols(),
                    positions.rows(),
                    positions.cols()
                )));
            }
        }
        let split = vec![SplitTag::Train; positions.rows()];
        Ok(Snapshot {
            time,
            positions,
            velocities,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    pub fn velocities(&self) -> Option<&Matrix> {
        self.velocities.as_ref()
    }

    pub fn split_tags(&self) -> &[SplitTag] {
        &self.split
    }

    /// Positions carrying a given split tag.
    pub fn positions_with_tag(&self, tag: SplitTag) -> Matrix {
        let idx: Vec<usize> = (0..self.len()).filter(|&r| self.split[r] == tag).collect();
        self.positions.select_rows(&idx)
    }

    /// k-NN reference field over this snapshot's velocities.
    pub fn reference_field(&self, k: usize, weighting: Weighting) -> Result<ReferenceField> {
        ReferenceField::knn(self.positions.clone(), self.velocities.clone(), k, weighting)
    }

    /// Serialize with the `t,x1..xd[,v1..vd]` header, LF endings, shortest
    /// round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("t");
        for c in 1..=d {
            let _ = write!(out, ",x{c}");
        }
        if self.velocities.is_some() {
            for c in 1..=d {
                let _ = write!(out, ",v{c}");
            }
        }
        out.push('\n');
        for r in 0..self.len() {
            let _ = write!(out, "{}", self.time);
            for c in 0..d {
                let _ = write!(out, ",{}", self.positions.get(r, c));
            }
            if let Some(v) = &self.velocities {
                for c in 0..d {
                    let _ = write!(out, ",{}", v.get(r, c));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Ordered snapshots with held-out interior marginals.
#[derive(Debug, Clone)]
pub struct MultiMarginalDataset {
    snapshots: Vec<Snapshot>,
    held_out: Vec<usize>,
    /// Rows are index-aligned across snapshots (known coupling).
    pub aligned: bool,
}

impl MultiMarginalDataset {
    pub fn new(snapshots: Vec<Snapshot>, held_out: Vec<usize>) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(Error::config("snapshots", "need at least two marginals"));
        }
        for w in snapshots.windows(2) {
            if w[0].time >= w[1].time {
                return Err(Error::config(
                    "snapshots",
                    "times must be strictly increasing",
                ));
            }
        }
        for &h in &held_out {
            if h == 0 || h + 1 >= snapshots.len() {
                return Err(Error::config(
                    "held_out",
                    format!("held-out marginal {h} must be interior"),
                ));
            }
        }
        let training = snapshots.len() - held_out.len();
        if training < 2 {
            return Err(Error::config("held_out", "too few marginals left to train"));
        }
        Ok(MultiMarginalDataset {
            snapshots,
            held_out,
            aligned: false,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshot(&self, i: usize) -> &Snapshot {
        &self.snapshots[i]
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn held_out_indices(&self) -> &[usize] {
        &self.held_out
    }

    /// `(time, positions)` of the non-held-out snapshots — the only view
    /// trainers get.
    pub fn training_marginals(&self) -> Vec<(f64, &Matrix)> {
        self.snapshots
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.held_out.contains(i))
            .map(|(_, s)| (s.time, &s.positions))
            .collect()
    }

    /// Training snapshots themselves (for velocity access).
    pub fn training_snapshots(&self) -> Vec<&Snapshot> {
        self.snapshots
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.held_out.contains(i))
            .map(|(_, s)| s)
            .collect()
    }

    pub fn held_out_snapshots(&self) -> Vec<(usize, &Snapshot)> {
        self.held_out.iter().map(|&i| (i, &self.snapshots[i])).collect()
    }

    /// k-NN field pooled over all training snapshots' positions/velocities.
    pub fn pooled_reference_field(&self, k: usize, weighting: Weighting) -> Result<ReferenceField> {
        let train = self.training_snapshots();
        let dim = train[0].dim();
        let total: usize = train.iter().map(|s| s.len()).sum();
        let mut pts = Matrix::zeros(total, dim);
        let mut vels = Matrix::zeros(total, dim);
        let mut row = 0;
        for s in &train {
            let v = s.velocities().ok_or_else(|| {
                Error::config("velocities", "pooled k-NN field needs velocities on every training snapshot")
            })?;
            for r in 0..s.len() {
                pts.row_mut(row).copy_from_slice(s.positions().row(r));
                vels.row_mut(row).copy_from_slice(v.row(r));
                row += 1;
            }
        }
        ReferenceField::knn(pts, Some(vels), k, weighting)
    }
}

/// Two asymmetric circle populations and the rotation that transports one
/// onto the other.
///
/// Angles follow a von-Mises-like density `∝ exp(skew·cos(θ − θ₀))`, with the
/// source concentrated at angle 0 and the target at π; a half-turn rotation
/// (`ω = π` over unit time) maps one density onto the other. `noise` is the
/// radial jitter scale.
pub fn gen_asymmetric_circles(
    n: usize,
    radii: (f64, f64),
    skew: f64,
    noise: f64,
    seed: u64,
) -> Result<(Snapshot, Snapshot, ReferenceField)> {
    if n == 0 {
        return Err(Error::config("n", "need at least one sample"));
    }
    if radii.0 <= 0.0 || radii.1 <= 0.0 {
        return Err(Error::config("radii", "radii must be positive"));
    }
    if skew < 0.0 {
        return Err(Error::config("skew", "concentration must be nonnegative"));
    }
    let omega = std::f64::consts::PI;
    let field = ReferenceField::Rotational2D { omega };

    let make = |radius: f64, center_angle: f64, label: &str| -> Result<Snapshot> {
        let mut stream = rng::stream(seed, label);
        let mut pts = Matrix::zeros(n, 2);
        let mut vels = Matrix::zeros(n, 2);
        for r in 0..n {
            let theta = sample_von_mises(skew, center_angle, &mut stream);
            let jitter: f64 = StandardNormal.sample(&mut stream);
            let rad = radius + noise * jitter;
            let x = [rad * theta.cos(), rad * theta.sin()];
            pts.row_mut(r).copy_from_slice(&x);
            vels.row_mut(r).copy_from_slice(&field.eval(&x, 0.0));
        }
        let mut snap = Snapshot::new(0.0, pts, Some(vels))?;
        snap.time = if label.ends_with("src") { 0.0 } else { 1.0 };
        Ok(snap)
    };

    let source = make(radii.0, 0.0, "circles/src")?;
    let target = make(radii.1, std::f64::consts::PI, "circles/tgt")?;
    Ok((source, target, field))
}

fn sample_von_mises(kappa: f64, center: f64, stream: &mut rand_chacha::ChaCha8Rng) -> f64 {
    if kappa == 0.0 {
        return stream.random_range(0.0..std::f64::consts::TAU);
    }
    // rejection from the uniform proposal; acceptance exp(κ(cos(θ−c) − 1)) ≤ 1
    loop {
        let theta = stream.random_range(0.0..std::f64::consts::TAU);
        let accept = (kappa * ((theta - center).cos() - 1.0)).exp();
        if stream.random_range(0.0..1.0) < accept {
            return theta;
        }
    }
}

/// Two Gaussian clouds `N(∓0.1·e₁, σ²·I)` bridged by a spiral field: constant
/// advection `0.2` along the first coordinate plus a rigid π-rotation of
/// coordinates 2–3. Needs `d ≥ 3`.
pub fn gen_gaussian_spiral(
    n: usize,
    d: usize,
    sigma_marginals: f64,
    seed: u64,
) -> Result<(Snapshot, Snapshot, ReferenceField)> {
    if n == 0 {
        return Err(Error::config("n", "need at least one sample"));
    }
    let speed = 0.2;
    let omega = std::f64::consts::PI;
    let field = ReferenceField::spiral(speed, omega, d)?;

    let make = |center0: f64, time: f64, label: &str| -> Result<Snapshot> {
        let mut stream = rng::stream(seed, label);
        let mut pts = Matrix::zeros(n, d);
        let mut vels = Matrix::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                let z: f64 = StandardNormal.sample(&mut stream);
                let center = if c == 0 { center0 } else { 0.0 };
                pts.set(r, c, center + sigma_marginals * z);
            }
            let v = field.eval(pts.row(r), time);
            vels.row_mut(r).copy_from_slice(&v);
        }
        Snapshot::new(time, pts, Some(vels))
    };

    let source = make(-0.1, 0.0, "spiral/src")?;
    let target = make(0.1, 1.0, "spiral/tgt")?;
    Ok((source, target, field))
}

/// Integrate `n` particles under `field` and record snapshots at the marginal
/// times, keeping the index alignment (known coupling).
///
/// Initial positions are uniform in a ball of `init_radius` around
/// `init_center`. Attached velocities are forward differences across
/// marginals — `(x_{m+1} − x_m)/Δt` — with a backward difference at the last
/// marginal; they converge to the field first-order in the marginal spacing.
#[allow(clippy::too_many_arguments)]
pub fn rollout_dataset(
    field: &ReferenceField,
    n: usize,
    marginal_times: &[f64],
    dt_solver: f64,
    init_center: &[f64],
    init_radius: f64,
    held_out: Vec<usize>,
    seed: u64,
) -> Result<MultiMarginalDataset> {
    if marginal_times.len() < 2 {
        return Err(Error::config("marginal_times", "need at least two marginals"));
    }
    if dt_solver <= 0.0 {
        return Err(Error::config("dt_solver", "solver step must be positive"));
    }
    let d = field.dim();
    if init_center.len() != d {
        return Err(Error::dimension(format!(
            "init center in R^{} for a field over R^{d}",
            init_center.len()
        )));
    }

    let mut stream = rng::stream(seed, "rollout/init");
    let mut x = Matrix::zeros(n, d);
    for r in 0..n {
        // uniform in the ball: normalized Gaussian direction, radius ~ r·U^(1/d)
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut stream)).collect();
        let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let u: f64 = stream.random_range(0.0..1.0_f64);
        let rad = init_radius * u.powf(1.0 / d as f64);
        for c in 0..d {
            dir[c] = init_center[c] + rad * dir[c] / nrm;
        }
        x.row_mut(r).copy_from_slice(&dir);
    }

    let mut recorded: Vec<Matrix> = Vec::with_capacity(marginal_times.len());
    recorded.push(x.clone());
    for w in marginal_times.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / dt_solver).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        let mut t = w[0];
        for _ in 0..steps {
            for r in 0..n {
                let v = field.eval(x.row(r), t);
                for c in 0..d {
                    let cur = x.get(r, c);
                    x.set(r, c, cur + dt * v[c]);
                }
            }
            t += dt;
        }
        recorded.push(x.clone());
    }

    let mut snapshots = Vec::with_capacity(marginal_times.len());
    for (m, positions) in recorded.iter().enumerate() {
        let mut vels = Matrix::zeros(n, d);
        if m + 1 < recorded.len() {
            let dt_m = marginal_times[m + 1] - marginal_times[m];
            for r in 0..n {
                for c in 0..d {
                    vels.set(r, c, (recorded[m + 1].get(r, c) - positions.get(r, c)) / dt_m);
                }
            }
        } else {
            let dt_m = marginal_times[m] - marginal_times[m - 1];
            for r in 0..n {
                for c in 0..d {
                    vels.set(r, c, (positions.get(r, c) - recorded[m - 1].get(r, c)) / dt_m);
                }
            }
        }
        snapshots.push(Snapshot::new(marginal_times[m], positions.clone(), Some(vels))?);
    }

    let mut ds = MultiMarginalDataset::new(snapshots, held_out)?;
    ds.aligned = true;
    Ok(ds)
}

/// Parse a snapshot from CSV with header `t,x1..xd[,v1..vd]`.
///
/// Every row must carry the same time label; parse failures cite the 1-based
/// line number.
pub fn ingest_csv(path: &Path) -> Result<Snapshot> {
    let text = std::fs::read_to_string(path)?;
    parse_snapshot_csv(&text)
}

pub fn parse_snapshot_csv(text: &str) -> Result<Snapshot> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        reason: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") {
        return Err(Error::Parse {
            line: 1,
            reason: format!("header must start with `t`, got `{header}`"),
        });
    }
    let d = cols.iter().skip(1).take_while(|c| c.starts_with('x')).count();
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            reason: "no coordinate columns x1..xd".into(),
        });
    }
    let has_velocities = cols.len() == 1 + 2 * d;
    if !has_velocities && cols.len() != 1 + d {
        return Err(Error::Parse {
            line: 1,
            reason: format!(
                "expected 1+{d} or 1+{} columns, found {}",
                2 * d,
                cols.len()
            ),
        });
    }

    let mut time: Option<f64> = None;
    let mut positions: Vec<Vec<f64>> = Vec::new();
    let mut velocities: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("invalid float `{s}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("non-finite value `{s}`"),
                });
            }
            Ok(v)
        };
        let t = parse(fields[0])?;
        match time {
            None => time = Some(t),
            Some(t0) if t0 != t => {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("snapshot mixes time labels {t0} and {t}"),
                })
            }
            _ => {}
        }
        let pos: Result<Vec<f64>> = fields[1..=d].iter().map(|s| parse(s)).collect();
        positions.push(pos?);
        if has_velocities {
            let vel: Result<Vec<f64>> = fields[d + 1..].iter().map(|s| parse(s)).collect();
            velocities.push(vel?);
        }
    }
    if positions.is_empty() {
        return Err(Error::Parse {
            line: 2,
            reason: "no data rows".into(),
        });
    }
    Snapshot::new(
        time.unwrap(),
        Matrix::from_rows(&positions)?,
        has_velocities.then(|| Matrix::from_rows(&velocities)).transpose()?,
    )
}

/// Seeded shuffle-then-partition split. One fraction marks everything train;
/// two map to train/test; three to train/val/test. Fractions must sum to one.
/// Returns warnings naming any empty split.
pub fn split(snapshot: &mut Snapshot, fractions: &[f64], seed: u64) -> Result<Vec<String>> {
    if fractions.is_empty() || fractions.len() > 3 {
        return Err(Error::config("fractions", "expected 1 to 3 fractions"));
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::config("fractions", "each fraction must lie in [0, 1]"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "fractions",
            format!("fractions sum to {total}, expected 1"),
        ));
    }
    let tags: &[SplitTag] = match fractions.len() {
        1 => &[SplitTag::Train],
        2 => &[SplitTag::Train, SplitTag::Test],
        _ => &[SplitTag::Train, SplitTag::Val, SplitTag::Test],
    };

    let n = snapshot.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = rng::stream(seed, "split/shuffle");
    for i in (1..n).rev() {
        let j = stream.random_range(0..=i);
        order.swap(i, j);
    }

    let mut warnings = Vec::new();
    let mut boundaries = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    for f in fractions {
        cum += f;
        boundaries.push((cum * n as f64).round() as usize);
    }
    *boundaries.last_mut().unwrap() = n;

    let mut start = 0;
    for (k, &end) in boundaries.iter().enumerate() {
        if end == start {
            warnings.push(format!("split `{:?}` is empty with n = {n}", tags[k]));
        }
        for &row in &order[start..end] {
            snapshot.split[row] = tags[k];
        }
        start = end;
    }
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circles_land_on_the_circle_without_noise() {
        let (src, tgt, _) = gen_asymmetric_circles(500, (1.0, 1.5), 2.0, 0.0, 3).unwrap();
        for r in 0..src.len() {
            let p = src.positions().row(r);
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 1e-12);
        }
        for r in 0..tgt.len() {
            let p = tgt.positions().row(r);
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn circles_zero_skew_gives_uniform_angles() {
        let n = 10_000;
        let (src, _, _) = gen_asymmetric_circles(n, (1.0, 1.0), 0.0, 0.0, 5).unwrap();
        let bins = 16;
        let mut counts = vec![0usize; bins];
        for r in 0..n {
            let p = src.positions().row(r);
            let theta = p[1].atan2(p[0]).rem_euclid(std::f64::consts::TAU);
            counts[(theta / std::f64::consts::TAU * bins as f64) as usize % bins] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // χ²(15) critical value at the 1% level
        assert!(chi2 < 30.578, "chi2 {chi2}");
    }

    #[test]
    fn circles_skew_concentrates_angles() {
        let n = 4000;
        let (src, _, _) = gen_asymmetric_circles(n, (1.0, 1.0), 4.0, 0.0, 7).unwrap();
        // most mass within ±π/2 of the center angle 0
        let near = (0..n)
            .filter(|&r| {
                let p = src.positions().row(r);
                p[1].atan2(p[0]).abs() < std::f64::consts::FRAC_PI_2
            })
            .count();
        assert!(near as f64 / n as f64 > 0.85);
    }

    #[test]
    fn circles_replay_bitwise() {
        let (a1, b1, _) = gen_asymmetric_circles(50, (1.0, 1.2), 1.0, 0.05, 11).unwrap();
        let (a2, b2, _) = gen_asymmetric_circles(50, (1.0, 1.2), 1.0, 0.05, 11).unwrap();
        assert_eq!(a1.positions().as_slice(), a2.positions().as_slice());
        assert_eq!(b1.positions().as_slice(), b2.positions().as_slice());
    }

    #[test]
    fn gaussian_spiral_centers() {
        let n = 100_000;
        let (src, tgt, field) = gen_gaussian_spiral(n, 3, 1.0, 13).unwrap();
        let mean = |m: &Matrix, c: usize| -> f64 {
            (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / m.rows() as f64
        };
        let se = 3.0 / (n as f64).sqrt();
        assert!((mean(src.positions(), 0) + 0.1).abs() < se);
        assert!((mean(tgt.positions(), 0) - 0.1).abs() < se);
        for c in 1..3 {
            assert!(mean(src.positions(), c).abs() < se);
        }
        // field value at (·, 1, 0, …) → (0.2, 0, −π)
        let v = field.eval(&[0.0, 1.0, 0.0], 0.0);
        assert_eq!(v, vec![0.2, 0.0, -std::f64::consts::PI]);
    }

    #[test]
    fn gaussian_spiral_supports_dim_20() {
        let (src, _, field) = gen_gaussian_spiral(10, 20, 1.0, 1).unwrap();
        assert_eq!(src.dim(), 20);
        assert_eq!(field.dim(), 20);
        assert!(gen_gaussian_spiral(10, 2, 1.0, 1).is_err());
    }

    #[test]
    fn rollout_zero_field_is_static() {
        let field = ReferenceField::Zero { dim: 2 };
        let ds = rollout_dataset(&field, 20, &[0.0, 0.5, 1.0], 1e-2, &[0.0, 0.0], 0.1, vec![], 3)
            .unwrap();
        let first = ds.snapshot(0).positions().as_slice().to_vec();
        for m in 1..ds.len() {
            assert_eq!(ds.snapshot(m).positions().as_slice(), first.as_slice());
        }
    }

    #[test]
    fn rollout_full_rotation_returns_home() {
        // ω = 1 over a 2π span is one full period
        let field = ReferenceField::Rotational2D { omega: 1.0 };
        let ds = rollout_dataset(
            &field,
            10,
            &[0.0, std::f64::consts::TAU],
            1e-4,
            &[1.0, 0.0],
            0.05,
            vec![],
            9,
        )
        .unwrap();
        let start = ds.snapshot(0).positions();
        let end = ds.snapshot(1).positions();
        for r in 0..10 {
            for c in 0..2 {
                assert!(
                    (start.get(r, c) - end.get(r, c)).abs() < 1e-3,
                    "particle {r} coord {c}"
                );
            }
        }
    }

    #[test]
    fn rollout_velocities_converge_first_order() {
        let field = ReferenceField::Rotational2D { omega: 1.0 };
        let err_at = |spacing: f64| -> f64 {
            let times = [0.0, spacing, 2.0 * spacing];
            let ds = rollout_dataset(&field, 5, &times, 1e-5, &[1.0, 0.0], 0.01, vec![], 21)
                .unwrap();
            let snap = ds.snapshot(0);
            let vels = snap.velocities().unwrap();
            let mut worst: f64 = 0.0;
            for r in 0..snap.len() {
                let truth = field.eval(snap.positions().row(r), 0.0);
                let err = crate::numkit::dist(vels.row(r), &truth)
                    / crate::numkit::norm(&truth).max(1e-12);
                worst = worst.max(err);
            }
            worst
        };
        let coarse = err_at(0.2);
        let fine = err_at(0.1);
        let ratio = coarse / fine;
        assert!(
            (1.5..=2.5).contains(&ratio),
            "first-order convergence violated: {coarse} / {fine} = {ratio}"
        );
    }

    #[test]
    fn rollout_replay_is_exact() {
        let field = ReferenceField::Rotational2D { omega: 1.0 };
        let a = rollout_dataset(&field, 8, &[0.0, 1.0], 1e-2, &[1.0, 0.0], 0.1, vec![], 5)
            .unwrap();
        let b = rollout_dataset(&field, 8, &[0.0, 1.0], 1e-2, &[1.0, 0.0], 0.1, vec![], 5)
            .unwrap();
        for m in 0..a.len() {
            assert_eq!(
                a.snapshot(m).positions().as_slice(),
                b.snapshot(m).positions().as_slice()
            );
        }
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let (src, _, _) = gen_asymmetric_circles(25, (1.0, 1.0), 1.5, 0.1, 17).unwrap();
        let text = src.to_csv();
        let parsed = parse_snapshot_csv(&text).unwrap();
        assert_eq!(parsed.time, src.time);
        assert_eq!(parsed.positions().as_slice(), src.positions().as_slice());
        assert_eq!(
            parsed.velocities().unwrap().as_slice(),
            src.velocities().unwrap().as_slice()
        );
    }

    #[test]
    fn csv_attaches_velocities_when_columns_present() {
        let text = "t,x1,x2,v1,v2\n0.5,1,2,3,4\n0.5,5,6,7,8\n";
        let snap = parse_snapshot_csv(text).unwrap();
        assert_eq!(snap.time, 0.5);
        assert_eq!(snap.velocities().unwrap().row(1), &[7.0, 8.0]);
        let no_vel = parse_snapshot_csv("t,x1,x2\n0,1,2\n").unwrap();
        assert!(no_vel.velocities().is_none());
    }

    #[test]
    fn csv_errors_cite_the_line() {
        let mut rows = String::from("t,x1\n");
        for i in 0..20 {
            rows.push_str(&format!("0,{i}\n"));
        }
        // corrupt what ends up as line 17 (header is line 1)
        let mut lines: Vec<&str> = rows.lines().collect();
        lines[16] = "0,not-a-float";
        let text = lines.join("\n");
        match parse_snapshot_csv(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 17),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_mixed_times() {
        let text = "t,x1\n0,1\n1,2\n";
        assert!(matches!(
            parse_snapshot_csv(text),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn split_10_into_8_1_1() {
        let (mut snap, _, _) = gen_asymmetric_circles(10, (1.0, 1.0), 0.0, 0.0, 1).unwrap();
        let warnings = split(&mut snap, &[0.8, 0.1, 0.1], 7).unwrap();
        assert!(warnings.is_empty());
        let count = |tag| snap.split_tags().iter().filter(|&&t| t == tag).count();
        assert_eq!(count(SplitTag::Train), 8);
        assert_eq!(count(SplitTag::Val), 1);
        assert_eq!(count(SplitTag::Test), 1);
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let (mut a, _, _) = gen_asymmetric_circles(37, (1.0, 1.0), 0.0, 0.0, 2).unwrap();
        let mut b = a.clone();
        split(&mut a, &[0.8, 0.2], 11).unwrap();
        split(&mut b, &[0.8, 0.2], 11).unwrap();
        assert_eq!(a.split_tags(), b.split_tags());
        assert_eq!(
            a.positions_with_tag(SplitTag::Train).rows()
                + a.positions_with_tag(SplitTag::Test).rows(),
            37
        );
    }

    #[test]
    fn split_warns_on_empty_bucket() {
        let (mut snap, _, _) = gen_asymmetric_circles(3, (1.0, 1.0), 0.0, 0.0, 2).unwrap();
        let warnings = split(&mut snap, &[0.9, 0.05, 0.05], 1).unwrap();
        assert!(!warnings.is_empty());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let (mut snap, _, _) = gen_asymmetric_circles(5, (1.0, 1.0), 0.0, 0.0, 2).unwrap();
        assert!(split(&mut snap, &[0.5, 0.6], 1).is_err());
    }

    #[test]
    fn held_out_marginals_hidden_from_trainers() {
        let field = ReferenceField::Rotational2D { omega: 1.0 };
        let ds = rollout_dataset(
            &field,
            6,
            &[0.0, 0.25, 0.5, 0.75, 1.0],
            1e-2,
            &[1.0, 0.0],
            0.1,
            vec![1, 3],
            3,
        )
        .unwrap();
        let train = ds.training_marginals();
        assert_eq!(train.len(), 3);
        let times: Vec<f64> = train.iter().map(|(t, _)| *t).collect();
        assert_eq!(times, vec![0.0, 0.5, 1.0]);
        assert_eq!(ds.held_out_snapshots().len(), 2);
    }

    #[test]
    fn held_out_endpoints_are_rejected() {
        let field = ReferenceField::Zero { dim: 2 };
        let err = rollout_dataset(
            &field,
            4,
            &[0.0, 0.5, 1.0],
            1e-2,
            &[0.0, 0.0],
            0.1,
            vec![0],
            1,
        );
        assert!(err.is_err());
    }
}
