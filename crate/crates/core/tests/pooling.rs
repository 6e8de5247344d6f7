use mfprice_core::condexp::{bucket_means, MIN_BUCKET};
use mfprice_core::noise_tree::{bucket_indexed, transition_matrix, GridSpec, KeyMode};
use mfprice_core::paths::{read_batch, sample_batch, write_batch};
use mfprice_core::paths::{InformedFactorSpec, InitLaw, RhoConvention};

fn spec() -> GridSpec {
    GridSpec::new(2, 1, 4, 1.0).unwrap()
}

/// `count` samples with node path `path` and constant value `value`.
fn group(path: [u16; 3], count: usize, value: f64, paths: &mut Vec<Vec<u16>>, values: &mut Vec<f64>) {
    for _ in 0..count {
        paths.push(path.to_vec());
        values.push(value);
    }
}

#[test]
fn well_populated_keys_use_their_own_mean() {
    let (mut paths, mut values) = (Vec::new(), Vec::new());
    group([4, 4, 4], 40, 1.0, &mut paths, &mut values);
    group([5, 4, 4], 35, 3.0, &mut paths, &mut values);
    let b = bucket_indexed(&paths, &spec(), KeyMode::FullPrefix);
    let k = transition_matrix(&spec());
    let stats = bucket_means(&b.intervals[1], KeyMode::FullPrefix, &k, &values, MIN_BUCKET);
    assert_eq!(stats.len(), 2);
    assert_eq!((stats[0].mean, stats[0].count, stats[0].pooled), (1.0, 40, false));
    assert_eq!((stats[1].mean, stats[1].count, stats[1].pooled), (3.0, 35, false));
    assert_eq!(stats[0].se, 0.0);
}

#[test]
fn undersized_prefix_borrows_from_keys_with_the_same_current_state() {
    let (mut paths, mut values) = (Vec::new(), Vec::new());
    group([4, 6, 0], 40, 2.0, &mut paths, &mut values);
    group([5, 6, 0], 10, 4.0, &mut paths, &mut values);
    group([5, 3, 0], 50, 9.0, &mut paths, &mut values);
    let b = bucket_indexed(&paths, &spec(), KeyMode::FullPrefix);
    let k = transition_matrix(&spec());
    let level = &b.intervals[2];
    let stats = bucket_means(level, KeyMode::FullPrefix, &k, &values, MIN_BUCKET);
    let at = |states: &[u16]| level.keys.iter().position(|key| key.states == states).unwrap();
    let small = stats[at(&[5, 6])];
    assert!(small.pooled);
    assert_eq!(small.count, 10);
    assert!((small.mean - (40.0 * 2.0 + 10.0 * 4.0) / 50.0).abs() < 1e-15);
    assert_eq!(stats[at(&[4, 6])].mean, 2.0);
    assert_eq!(stats[at(&[5, 3])].mean, 9.0);
}

#[test]
fn isolated_state_falls_back_to_kernel_weighted_key_means() {
    let (mut paths, mut values) = (Vec::new(), Vec::new());
    group([4, 0, 0], 100, 1.0, &mut paths, &mut values);
    group([6, 0, 0], 60, -2.0, &mut paths, &mut values);
    group([5, 0, 0], 5, 3.0, &mut paths, &mut values);
    let k = transition_matrix(&spec());
    for mode in [KeyMode::Markov, KeyMode::FullPrefix] {
        let b = bucket_indexed(&paths, &spec(), mode);
        let stats = bucket_means(&b.intervals[1], mode, &k, &values, MIN_BUCKET);
        // keys sorted by state: 4, 5, 6
        let s = stats[1];
        assert!(s.pooled);
        // each key's mean counts once, weighted by the kernel out of state 5, whatever its size
        let (w4, w5, w6) = (k.prob(5, 4), k.prob(5, 5), k.prob(5, 6));
        let expected = (w4 * 1.0 + w5 * 3.0 + w6 * -2.0) / (w4 + w5 + w6);
        assert!((s.mean - expected).abs() < 1e-13, "{mode:?}: {} vs {expected}", s.mean);
        assert!(!stats[0].pooled && !stats[2].pooled);
    }
}

#[test]
fn root_interval_is_never_pooled() {
    let (mut paths, mut values) = (Vec::new(), Vec::new());
    group([4, 4, 4], 3, 7.0, &mut paths, &mut values);
    let b = bucket_indexed(&paths, &spec(), KeyMode::FullPrefix);
    let stats = bucket_means(&b.intervals[0], KeyMode::FullPrefix, &transition_matrix(&spec()), &values, MIN_BUCKET);
    assert_eq!(stats.len(), 1);
    assert!(!stats[0].pooled);
    assert_eq!(stats[0].mean, 7.0);
}

#[test]
fn batch_survives_a_write_read_round_trip() {
    let factor = InformedFactorSpec { rho: 0.3, convention: RhoConvention::RhoSquared, ..InformedFactorSpec::correlated(0.3) };
    let init = [InitLaw::Gaussian { mean: 0.1, sd: 0.2 }, InitLaw::Point(-0.5)];
    let batch = sample_batch(&GridSpec::new(3, 2, 3, 2.0).unwrap(), 77, 50, &factor, init).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    write_batch(&batch, &path).unwrap();
    assert_eq!(read_batch(&path).unwrap(), batch);
}

#[test]
fn truncated_batch_file_is_rejected() {
    let batch = sample_batch(&spec(), 1, 10, &InformedFactorSpec::correlated(0.5), [InitLaw::Point(0.0); 2]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    write_batch(&batch, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_batch(&path).is_err());
    std::fs::write(&path, b"not a batch").unwrap();
    assert!(read_batch(&path).is_err());
}
