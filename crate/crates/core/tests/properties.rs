use fairmoe_core::data::{self, SynthConfig};
use fairmoe_core::metrics::{confusion, eopp_eodd, Prediction, PredictionLog};
use fairmoe_core::moe::{
    moe_forward, selection_probabilities, GroupStats, MoEConvLayer, MoeLayerSpec, RouteContext, RouteMode,
};
use fairmoe_core::objectives::{mutual_information, JointDistribution};
use fairmoe_core::tensor::{Tensor, LOG_EPS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

fn normalized(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn joint_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5, 1usize..5).prop_flat_map(|(g, e)| {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, e), g).prop_filter_map("zero mass", |rows| {
            let total: f64 = rows.iter().flatten().sum();
            (total > 1e-6).then(|| rows.iter().map(|r| r.iter().map(|v| v / total).collect()).collect())
        })
    })
}

fn mi(rows: &[Vec<f64>]) -> f64 {
    mutual_information(&JointDistribution::from_matrix(rows).unwrap(), LOG_EPS).unwrap().item()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let s = Tensor::new(&[rows, cols], x).unwrap().softmax(1).unwrap().to_vec();
        for r in s.chunks(cols) {
            prop_assert!(r.iter().all(|&v| v > 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_probabilities_scale_invariant(
        raw in prop::collection::vec(0.01f64..1.0, 2..6),
        sizes in prop::collection::vec(1u64..10_000, 6),
        factor in 2u64..1000,
    ) {
        let m = raw.len();
        let scores = normalized(raw);
        let base = GroupStats::new(sizes[..m].to_vec()).unwrap();
        let scaled = GroupStats::new(sizes[..m].iter().map(|s| s * factor).collect()).unwrap();
        let a = selection_probabilities(&scores, &base).unwrap();
        let b = selection_probabilities(&scores, &scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let equal = GroupStats::new(vec![sizes[0]; m]).unwrap();
        let c = selection_probabilities(&scores, &equal).unwrap();
        for (x, y) in c.iter().zip(&scores) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_information_bounds(rows in joint_strategy()) {
        let j = JointDistribution::from_matrix(&rows).unwrap();
        let v = mi(&rows);
        let bound = entropy(j.group_priors()).min(entropy(&j.expert_marginals()));
        prop_assert!(v >= -1e-12, "negative MI {v}");
        prop_assert!(v <= bound + 1e-9, "MI {v} above bound {bound}");
    }

    #[test]
    fn mutual_information_symmetric(rows in joint_strategy()) {
        let t = JointDistribution::from_matrix(&rows).unwrap().transpose().unwrap();
        prop_assert!((mi(&rows) - mi(&t.matrix())).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_relabeling(rows in joint_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..rows[0].len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&k| r[k]).collect()).collect();
        prop_assert!((mi(&rows) - mi(&permuted)).abs() < 1e-12);
    }

    #[test]
    fn fairness_gaps_bounded_and_label_free(
        rows in prop::collection::vec((0usize..4, 0usize..4, 0usize..2), 1..80),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let preds: Vec<Prediction> = rows
            .iter()
            .enumerate()
            .map(|(i, &(truth, predicted, group))| Prediction { sample_id: i as u64, truth, predicted, group })
            .collect();
        let log = PredictionLog::new(preds.clone()).unwrap();
        let gaps = eopp_eodd(&confusion(&log, 4, 2).unwrap()).unwrap();
        for v in [gaps.eopp0, gaps.eopp1, gaps.eodd] {
            prop_assert!((0.0..=1.0).contains(&v));
        }

        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = eopp_eodd(&confusion(&PredictionLog::new(shuffled).unwrap(), 4, 2).unwrap()).unwrap();
        prop_assert_eq!(gaps, permuted);

        let swapped: Vec<Prediction> = preds.iter().map(|p| Prediction { group: 1 - p.group, ..*p }).collect();
        let relabeled = eopp_eodd(&confusion(&PredictionLog::new(swapped).unwrap(), 4, 2).unwrap()).unwrap();
        prop_assert_eq!(gaps, relabeled);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_round_trips(
        samples in 20usize..60,
        side in 2usize..9,
        channels in 1usize..3,
        noise in 0.0f64..0.3,
        seed in any::<u64>(),
    ) {
        let cfg = SynthConfig { samples, height: side, width: side + 1, channels, noise, seed, ..SynthConfig::default() };
        let (ds, _) = data::generate(&cfg).unwrap();
        let bytes = data::encode(&ds).unwrap();
        let back = data::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(data::encode(&back).unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.fmds");
        data::save(&ds, &path).unwrap();
        prop_assert_eq!(data::load(&path).unwrap(), ds.clone());

        for s in &ds.samples {
            prop_assert_eq!(s.group, cfg.group_of(s.t));
            prop_assert_eq!(s.group, usize::from(s.t >= cfg.threshold));
        }
    }

    #[test]
    fn hard_routing_runs_the_recorded_expert(seed in any::<u64>(), mode_pick in 0usize..3) {
        use rand::Rng;
        let mode = [RouteMode::Sample, RouteMode::Argmax, RouteMode::GroupLabel][mode_pick];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MoeLayerSpec {
            layer_index: 2,
            in_channels: 1,
            out_channels: 2,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            experts: 2,
            router_width: 2,
        };
        let layer = MoEConvLayer::new(spec, &mut rng).unwrap();
        for (k, e) in layer.experts().iter().enumerate() {
            e.bias.data_mut().iter_mut().for_each(|b| *b = k as f64 + 1.0);
        }
        for v in layer.router().dense_weight.data_mut().iter_mut() {
            *v = rng.random_range(-3.0..3.0);
        }
        let n = 6;
        let x = Tensor::new(&[n, 1, 4, 4], (0..n * 16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 1).collect();
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let stats = GroupStats::new(vec![40, 60]).unwrap();
        let ctx = RouteContext { mode, seed, sample_ids: &ids, labels: Some(&groups) };
        let out = moe_forward(&x, &layer, &stats, &ctx).unwrap();
        let got = out.output.to_vec();
        let per = got.len() / n;
        for (i, rec) in out.records.iter().enumerate() {
            let xi = x.gather_rows(&[i]).unwrap();
            for (k, e) in layer.experts().iter().enumerate() {
                let want = e.apply(&xi, 1, 1).unwrap().to_vec();
                let same = want == got[i * per..(i + 1) * per];
                prop_assert_eq!(same, k == rec.chosen, "sample {} expert {}", i, k);
            }
            if mode == RouteMode::GroupLabel {
                prop_assert_eq!(rec.chosen, groups[i]);
            }
        }

        // a layer's record depends only on its input and seed
        let again = moe_forward(&x, &layer, &stats, &ctx).unwrap();
        prop_assert_eq!(&again.records, &out.records);
        let other = RouteContext { mode: RouteMode::Argmax, ..ctx };
        let _ = moe_forward(&x, &layer, &stats, &other).unwrap();
        prop_assert_eq!(moe_forward(&x, &layer, &stats, &ctx).unwrap().records, out.records);
    }
}

#[test]
fn forward_and_gradients_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = MoeLayerSpec {
            layer_index: 0,
            in_channels: 1,
            out_channels: 3,
            kernel_size: 3,
            stride: 2,
            padding: 1,
            experts: 2,
            router_width: 4,
        };
        let layer = MoEConvLayer::new(spec, &mut rng).unwrap();
        let x = Tensor::new(&[3, 1, 6, 6], (0..108).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::param(&[3, 2], vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2]).unwrap();
        let b = Tensor::param(&[2], vec![0.0, 0.1]).unwrap();
        let stats = GroupStats::new(vec![5, 7]).unwrap();
        let ids = [4, 9, 13];
        let ctx = RouteContext { mode: RouteMode::Sample, seed: 99, sample_ids: &ids, labels: None };
        let out = moe_forward(&x, &layer, &stats, &ctx).unwrap();
        let loss = out.output.relu().global_avg_pool().unwrap().dense(&w, &b).unwrap().cross_entropy(&[1, 0, 1]).unwrap();
        loss.backward().unwrap();
        let mut bits: Vec<u64> = vec![loss.item().to_bits()];
        for e in layer.experts() {
            bits.extend(e.kernel.grad().unwrap_or_default().iter().map(|v| v.to_bits()));
        }
        bits.extend(w.grad().unwrap().iter().map(|v| v.to_bits()));
        (bits, out.records)
    };
    assert_eq!(run(), run());
}
