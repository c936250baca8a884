mod common;

use kwscl::cl::{Algorithm, ClConfig, ClHead, ClState, PredictMode};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("k{j}")).collect()
}

fn random_head(seed: u64, d: usize, n: usize) -> ClHead {
    let mut r = kwscl::rng::seeded(seed);
    let mut gauss = |scale: f64| -> f64 { let z: f64 = StandardNormal.sample(&mut r); scale * z };
    let w = (0..d * n).map(|_| gauss(0.3)).collect();
    let b = (0..n).map(|_| gauss(0.1)).collect();
    ClHead::from_parts(d, w, b, labels(n)).unwrap()
}

fn random_stream(seed: u64, d: usize, n: usize, len: usize) -> Vec<(Vec<f64>, usize)> {
    let mut r = kwscl::rng::seeded(seed);
    (0..len)
        .map(|_| ((0..d).map(|_| StandardNormal.sample(&mut r)).collect(), r.random_range(0..n)))
        .collect()
}

#[test]
fn lwf_without_distillation_is_tinyol() {
    let cfg = ClConfig {
        lwf_lambda: 0.0,
        ..Default::default()
    };
    let head = random_head(1, 12, 15);
    let mut lwf = ClState::new(Algorithm::Lwf, head.clone(), cfg.clone()).unwrap();
    let mut plain = ClState::new(Algorithm::TinyOl, head, cfg).unwrap();
    for (f, y) in random_stream(2, 12, 15, 400) {
        lwf.step(&f, y).unwrap();
        plain.step(&f, y).unwrap();
    }
    for (a, b) in lwf.head().weights().iter().zip(plain.head().weights()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn zero_features_only_move_biases() {
    let zero = vec![0.0; 12];
    for algo in Algorithm::ALL {
        let head = random_head(3, 12, 14);
        let mut st = ClState::new(algo, head.clone(), ClConfig {
            batch_size: 4,
            ..Default::default()
        })
        .unwrap();
        for t in 0..3 {
            st.step(&zero, 12 + t % 2).unwrap();
        }
        st.finish().unwrap();
        // CWR's training head is reset at the boundary, so look at what it consolidated
        let after = if algo == Algorithm::Cwr { &st.consolidated().unwrap().head } else { st.head() };
        assert_eq!(after.weights(), head.weights(), "{algo}");
        assert_ne!(after.bias(), head.bias(), "{algo}");
    }
}

/// Plain scalar re-implementation of CWR with one feature and two classes.
#[test]
fn cwr_matches_scalar_oracle_over_three_batches() {
    let (lr, batch) = (0.2, 3);
    let start_w = [0.7, 0.0];
    let start_b = [0.1, 0.0];
    let head = ClHead::from_parts(1, start_w.to_vec(), start_b.to_vec(), labels(2)).unwrap();
    let cfg = ClConfig {
        learning_rate: lr,
        batch_size: batch,
        initial_class_count: 1,
        ..Default::default()
    };
    let mut st = ClState::new(Algorithm::Cwr, head, cfg).unwrap();
    let samples = [(0.5, 1), (-1.0, 0), (2.0, 1), (1.5, 1), (0.3, 1), (-0.2, 1), (1.0, 0), (0.4, 0), (-2.0, 1)];

    let (mut tw, mut tb) = (start_w, start_b);
    let (mut cw, mut cb) = (start_w, start_b);
    let mut counts = [0.0f64; 2];
    let mut seen = [false; 2];
    for (t, &(x, y)) in samples.iter().enumerate() {
        let p = common::softmax(&[tb[0] + x * tw[0], tb[1] + x * tw[1]]);
        for j in 0..2 {
            let g = p[j] - if j == y { 1.0 } else { 0.0 };
            tw[j] -= lr * g * x;
            tb[j] -= lr * g;
        }
        seen[y] = true;
        if (t + 1) % batch == 0 {
            for j in (0..2).filter(|&j| seen[j]) {
                cw[j] = (cw[j] * counts[j] + tw[j]) / (counts[j] + 1.0);
                cb[j] = (cb[j] * counts[j] + tb[j]) / (counts[j] + 1.0);
                counts[j] += 1.0;
            }
            tw = [0.0; 2];
            tb = [0.0; 2];
            seen = [false; 2];
        }
        st.step(&[x], y).unwrap();
        let cons = st.consolidated().unwrap();
        for j in 0..2 {
            assert!((cons.head.weights()[j] - cw[j]).abs() < 1e-12, "t {t} w{j}");
            assert!((cons.head.bias()[j] - cb[j]).abs() < 1e-12, "t {t} b{j}");
            assert!((st.head().weights()[j] - tw[j]).abs() < 1e-12, "t {t} training w{j}");
        }
        assert_eq!(cons.counts, counts.map(|c| c as u64).to_vec());
    }
    // evaluation goes through the consolidated head
    let x = 0.9;
    let want = common::argmax(&[cb[0] + x * cw[0], cb[1] + x * cw[1]]);
    assert_eq!(st.predict(&[x], PredictMode::Evaluation).unwrap(), want);
}

#[test]
fn checkpoint_resume_is_seamless() {
    let stream = random_stream(7, 12, 16, 300);
    for algo in Algorithm::ALL {
        let cfg = ClConfig {
            batch_size: 16,
            ..Default::default()
        };
        let mut straight = ClState::new(algo, random_head(8, 12, 16), cfg.clone()).unwrap();
        for (f, y) in &stream[..160] {
            straight.step(f, *y).unwrap();
        }
        let bytes = straight.to_checkpoint_bytes().unwrap();
        let mut resumed = ClState::read_checkpoint(&bytes, cfg).unwrap();
        assert_eq!(resumed, straight, "{algo}");
        for (f, y) in &stream[160..] {
            let a = straight.step(f, *y).unwrap();
            let b = resumed.step(f, *y).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(resumed, straight, "{algo}");
    }
}

#[test]
fn mid_batch_checkpoint_is_refused() {
    let mut st = ClState::new(Algorithm::TinyOlBatches, random_head(9, 12, 13), ClConfig::default()).unwrap();
    st.step(&[0.5; 12], 12).unwrap();
    assert!(st.to_checkpoint_bytes().is_err());
    assert!(ClState::read_checkpoint(b"CLHD0001", ClConfig::default()).is_err());
}
