use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zest::attributes::mean_rows;
use zest::baselines::{cluster_accuracy, kmeans, KMeansInit};
use zest::cvae::{generate_pseudo, kl_divergence, Cvae, CvaeConfig};
use zest::ingest::{
    featurize, make_partition, segment, train_val_test_split, DataPoint, Direction, Normalizer, PacketRecord,
    SplitRatios, Transport, FEATURES,
};
use zest::numerics::{ops, Tensor};
use zest::sane::{SaneConfig, SaneModel};

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

fn record(ts: f64, src: u16, dst: u16, transport: Transport, outbound: bool) -> PacketRecord {
    PacketRecord {
        timestamp: ts,
        src_port: src,
        dst_port: dst,
        src_internal: outbound,
        dst_internal: !outbound,
        transport,
        size: 100,
        direction: if outbound { Direction::Outbound } else { Direction::Inbound },
        device_id: "d".into(),
    }
}

fn transport() -> impl Strategy<Value = Transport> {
    prop_oneof![Just(Transport::Tcp), Just(Transport::Udp), Just(Transport::Other)]
}

/// Best agreement over all `k!` cluster-to-label bijections.
fn brute_force_accuracy(assign: &[usize], labels: &[usize], k: usize) -> f64 {
    fn perms(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }
    perms(k)
        .iter()
        .map(|p| assign.iter().zip(labels).filter(|(&a, &l)| p[a] == l).count())
        .max()
        .unwrap() as f64
        / labels.len() as f64
}

proptest! {
    #[test]
    fn softmax_ignores_row_shift(
        (rows, cols, data) in (1usize..5, 1usize..8).prop_flat_map(|(r, c)| (Just(r), Just(c), vec(-20.0..20.0f64, r * c))),
        shift in -50.0..50.0f64,
    ) {
        let x = tensor(rows, cols, data);
        let shifted = x.map(|v| v + shift);
        let d = ops::softmax_rows(&x).unwrap().max_abs_diff(&ops::softmax_rows(&shifted).unwrap());
        prop_assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn layer_norm_ignores_affine_shift(
        (cols, data) in (2usize..10).prop_flat_map(|c| (Just(c), vec(-5.0..5.0f64, c))),
        scale in 0.5..4.0f64,
        shift in -10.0..10.0f64,
    ) {
        let m = data.iter().sum::<f64>() / cols as f64;
        let var = data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
        let x = tensor(1, cols, data);
        let gain = Tensor::from_vec(&[cols], vec![1.0; cols]).unwrap();
        let bias = Tensor::from_vec(&[cols], vec![0.0; cols]).unwrap();
        let norm = |t: &Tensor<f64>| ops::layer_norm(t, &gain, &bias).unwrap().0;
        let base = norm(&x);
        let d = base.max_abs_diff(&norm(&x.map(|v| v + shift)));
        prop_assert!(d < 1e-5, "shift: {d}");
        // the variance epsilon only stays negligible when neither row is flat
        if var * scale.min(1.0).powi(2) > 1.0 {
            let d = base.max_abs_diff(&norm(&x.map(|v| scale * v + shift)));
            prop_assert!(d < 1e-5, "affine: {d}");
        }
    }

    #[test]
    fn service_port_features_ignore_port_order(
        ports in vec((1u16..=65535, 1u16..=65535, transport(), any::<bool>()), 1..20),
    ) {
        let a: Vec<PacketRecord> = ports.iter().enumerate()
            .map(|(i, &(s, d, t, o))| record(i as f64, s, d, t, o)).collect();
        let b: Vec<PacketRecord> = ports.iter().enumerate()
            .map(|(i, &(s, d, t, o))| record(i as f64, d, s, t, o)).collect();
        prop_assert_eq!(featurize(&a).unwrap(), featurize(&b).unwrap());
    }

    #[test]
    fn segmentation_keeps_whole_windows(rows in 0usize..300, n in 1usize..40) {
        let recs: Vec<PacketRecord> = (0..rows).map(|i| record(i as f64, 443, 50000, Transport::Tcp, true)).collect();
        let points = segment(&featurize(&recs).unwrap(), n, Some(0), "d");
        let total: usize = points.iter().map(|p| p.features.rows()).sum();
        prop_assert_eq!(total, n * (rows / n));
    }

    #[test]
    fn partition_is_a_disjoint_cover(devices in 2usize..30, frac in 0.0..1.0f64, seed in any::<u64>()) {
        let unseen = 1 + ((devices - 1) as f64 * frac) as usize % (devices - 1);
        let p = make_partition(devices, unseen, seed).unwrap();
        prop_assert_eq!(p.unseen.len(), unseen);
        prop_assert!(p.seen.iter().all(|c| !p.unseen.contains(c)));
        prop_assert_eq!(p.all(), (0..devices).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_a_disjoint_cover(labels in vec(0usize..6, 1..200), seed in any::<u64>()) {
        let s = train_val_test_split(&labels, SplitRatios::default(), seed);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    /// Min-max scaling: refitting on scaled data and scaling again is the
    /// identity (log-scaled columns excepted, see the 8-feature layout).
    #[test]
    fn normalization_is_idempotent(
        (cols, data) in (1usize..6).prop_flat_map(|c| (Just(c), vec(-100.0..100.0f32, 4 * c * 3))),
    ) {
        prop_assume!(cols != FEATURES);
        let points: Vec<DataPoint> = data.chunks(4 * cols).map(|chunk| DataPoint {
            features: Tensor::from_vec(&[4, cols], chunk.to_vec()).unwrap(),
            label: None,
            device_id: "d".into(),
        }).collect();
        let once = Normalizer::fit(&points).unwrap().apply(&points);
        let twice = Normalizer::fit(&once).unwrap().apply(&once);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!(a.features.max_abs_diff(&b.features) < 1e-5);
        }
    }

    #[test]
    fn attributes_ignore_point_order(rows in vec(vec(-10.0..10.0f32, 3), 1..30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (a, b) in mean_rows(&rows).iter().zip(mean_rows(&shuffled)) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn kl_is_non_negative(mu in vec(-10.0..10.0f64, 1..16), lv in vec(-8.0..8.0f64, 16)) {
        let kl = kl_divergence(&mu, &lv[..mu.len()]);
        prop_assert!(kl >= 0.0, "{kl}");
    }

    #[test]
    fn pseudo_data_is_balanced(k in 1usize..40, classes in 1usize..8, seed in any::<u64>()) {
        let cvae = Cvae::<f32>::new(CvaeConfig { input_dim: 5, attr_dim: 2, z_dim: 3, hidden: 6, seed, ..CvaeConfig::default() }).unwrap();
        let attrs: Vec<(usize, Vec<f32>)> = (0..classes).map(|c| (c * 3, vec![c as f32, -(c as f32)])).collect();
        let p = generate_pseudo(&cvae.decoder(), &attrs, k, seed).unwrap();
        for (c, _) in &attrs {
            prop_assert_eq!(p.labels.iter().filter(|&&l| l == *c).count(), k);
        }
        prop_assert!(p.latents.iter().all(|l| l.len() == 5));
    }

    #[test]
    fn kmeans_inertia_never_increases(
        points in vec(vec(-5.0..5.0f64, 2), 4..80),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= points.len());
        let r = kmeans(&points, k, &KMeansInit::Random, 50, seed).unwrap();
        for w in r.history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", r.history);
        }
    }

    #[test]
    fn hungarian_matches_brute_force(k in 1usize..=4, n in 1usize..60, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut a = assign.clone();
        let mut l = labels.clone();
        // pin the label and cluster count to k
        a.push(k - 1);
        l.push(k - 1);
        let got = cluster_accuracy(&a, &l).unwrap();
        let want = brute_force_accuracy(&a, &l, k);
        prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let perm: Vec<usize> = { use rand::seq::SliceRandom; let mut p: Vec<usize> = (0..k).collect(); p.shuffle(&mut rng); p };
        let fixed = a.iter().zip(&l).filter(|(&c, &y)| perm[c] == y).count() as f64 / l.len() as f64;
        prop_assert!(got >= fixed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), data in vec(-3.0..3.0f32, 6 * 8)) {
        let cfg = SaneConfig {
            seq_len: 6, d_model: 16, encoders: 2, heads: 4, d_mlp: 32, latent_dim: 6, attr_dim: 3,
            num_classes: 4, seed, ..SaneConfig::default()
        };
        let model = SaneModel::<f32>::new(cfg).unwrap();
        let x = Tensor::from_vec(&[6, 8], data).unwrap();
        let (_, cache) = model.forward_cached(&x).unwrap();
        for layer in cache.attention_weights() {
            for w in layer {
                for i in 0..w.rows() {
                    let s: f64 = w.row(i).iter().map(|&v| f64::from(v)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6, "{s}");
                }
            }
        }
    }
}
