use chartless::exec::Strategy;
use chartless::world::{sample_trajectory, Sampling, SurfacePatch, VelocityLaw, WorldSegment};

const KT: f64 = 0.01;

fn velocity(seg: &WorldSegment) -> [f64; 2] {
    let (a, b) = (seg.intrinsic_point(0), seg.intrinsic_point(1));
    [(b[0] - a[0]) / seg.dt, (b[1] - a[1]) / seg.dt]
}

/// Sample-weighted mean of `f` over segments and its standard error with
/// each segment treated as one cluster (all its samples share a velocity).
fn clustered_mean(segments: &[WorldSegment], f: impl Fn(&WorldSegment) -> f64) -> (f64, f64) {
    let total: f64 = segments.iter().map(|s| s.len() as f64).sum();
    let values: Vec<(f64, f64)> = segments.iter().map(|s| (s.len() as f64, f(s))).collect();
    let mean = values.iter().map(|(n, x)| n * x).sum::<f64>() / total;
    let var = values.iter().map(|(n, x)| (n * (x - mean)).powi(2)).sum::<f64>();
    (mean, var.sqrt() / total)
}

#[test]
fn recorded_velocities_follow_the_boltzmann_marginal() {
    let traj = sample_trajectory(
        &SurfacePatch::cylinder(1.0),
        &VelocityLaw::boltzmann(KT, 1.0),
        &Sampling::default(),
        100_000,
        41,
        Strategy::Parallel,
    )
    .unwrap();
    let s2 = KT;
    for axis in 0..2 {
        let (m1, se1) = clustered_mean(&traj.segments, |s| velocity(s)[axis]);
        assert!(m1.abs() <= 3.0 * se1, "axis {axis}: mean {m1} (se {se1})");
        let (m2, se2) = clustered_mean(&traj.segments, |s| velocity(s)[axis].powi(2));
        assert!((m2 - s2).abs() <= 3.0 * se2, "axis {axis}: variance {m2} (se {se2})");
        // Zero excess kurtosis: the fourth moment is 3σ⁴.
        let (m4, se4) = clustered_mean(&traj.segments, |s| velocity(s)[axis].powi(4));
        assert!((m4 - 3.0 * s2 * s2).abs() <= 3.0 * se4, "axis {axis}: fourth moment {m4} (se {se4})");
    }
}

#[test]
fn segments_started_on_the_patch_start_uniformly() {
    let patch = SurfacePatch::cylinder(1.0);
    let traj = sample_trajectory(
        &patch,
        &VelocityLaw::boltzmann(KT, 1.0),
        &Sampling::default(),
        60_000,
        42,
        Strategy::Parallel,
    )
    .unwrap();
    let mut hist = [0u64; 100];
    let mut n = 0u64;
    for seg in traj.segments.iter().filter(|s| s.first_index == 0) {
        let p = seg.intrinsic_point(0);
        let i = ((p[0] / patch.size[0] * 10.0) as usize).min(9);
        let j = ((p[1] / patch.size[1] * 10.0) as usize).min(9);
        hist[j * 10 + i] += 1;
        n += 1;
    }
    assert!(n > 10_000);
    let expected = n as f64 / 100.0;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 0.999 quantile of χ² with 99 degrees of freedom.
    assert!(chi2 < 148.23, "χ² = {chi2}");
}

#[test]
fn every_requested_segment_is_delivered() {
    let patch = SurfacePatch::cylinder(1.0);
    let law = VelocityLaw::boltzmann(KT, 1.0);
    let traj = sample_trajectory(&patch, &law, &Sampling::default(), 18_274, 1, Strategy::Parallel).unwrap();
    assert_eq!(traj.segments.len(), 18_274);
    assert!(traj.discarded > 0);
    assert!(traj.segments.iter().enumerate().all(|(i, s)| s.segment_id == i as u64 && s.len() >= 2));
    let one = sample_trajectory(&patch, &law, &Sampling::default(), 1, 1, Strategy::Sequential).unwrap();
    assert_eq!(one.segments.len(), 1);
    assert_eq!(one.segments[0], traj.segments[0]);
}
