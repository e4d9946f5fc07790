use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bmgf::config::ModelConfig;
use bmgf::data::{one_vs_rest, Dataset, DiscourseInstance, LabelSchema, Split};
use bmgf::encoder::{Encoder, TokenizedPair, CLS, EOS, SEP};
use bmgf::layers::ForwardCtx;
use bmgf::matching::{bilateral_match_tensors, multi_cos_values, MatchConfig, MatchWeights};
use bmgf::metrics::{accuracy, confusion_matrix, macro_f1};
use bmgf::model::Model;
use bmgf::tensor::{clip_grad_l2, Graph, Init, ParamStore, Tensor};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 1usize..6)
}

// ---------------------------------------------------------------- tensors

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c) in dims(), seed in any::<u64>(), scale in 0.1f64..500.0) {
        let t = {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
        };
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(&t);
        let p = g.softmax_rows(x, None).unwrap();
        for row in g.value(p).chunks(c) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clipping_bounds_the_norm(grads in prop::collection::vec(-50.0f64..50.0, 1..40), threshold in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.add("a", &[grads.len()], Init::FanIn(1), true, &mut rng);
        store.accumulate_raw(&[Some(grads.clone())]);
        let before = clip_grad_l2(&mut store, threshold).unwrap();
        let after = store.tensor(a).grad().unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(after <= threshold + 1e-9);
        prop_assert!((before - grads.iter().map(|v| v * v).sum::<f64>().sqrt()).abs() < 1e-9);
        if before <= threshold {
            prop_assert_eq!(store.tensor(a).grad().unwrap(), &grads[..]);
        }
    }

    #[test]
    fn accumulating_twice_doubles_exactly(x in matrix(2, 3, 2.0), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", &[3, 2], Init::FanIn(3), true, &mut rng);
        let grads = {
            let mut g = Graph::new(&store);
            let xv = g.constant(&x);
            let wv = g.param(w);
            let y = g.matmul(xv, wv).unwrap();
            let y = g.sigmoid(y);
            let loss = g.sum_all(y);
            g.backward(loss).unwrap()
        };
        store.accumulate(&grads);
        let once = store.tensor(w).grad().unwrap().to_vec();
        store.accumulate(&grads);
        let twice = store.tensor(w).grad().unwrap();
        for (a, b) in once.iter().zip(twice) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }
}

// ---------------------------------------------------------------- encoder

fn small_encoder(segments: bool, seed: u64) -> (ParamStore, Encoder) {
    let config = ModelConfig {
        d_model: 8,
        encoder_layers: 1,
        encoder_heads: 2,
        ff_dim: 8,
        max_len: 24,
        use_segment_embeddings: segments,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, config.encoder_config(20), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, enc)
}

fn ids(max: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(5usize..20, 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_layout(a1 in ids(10), a2 in ids(10)) {
        let p = TokenizedPair::from_ids(&a1, &a2).unwrap();
        let (m, n) = (a1.len(), a2.len());
        prop_assert_eq!(p.len(), m + n + 4);
        prop_assert_eq!(p.token_ids[0], CLS);
        prop_assert_eq!(p.token_ids[m + 1], SEP);
        prop_assert_eq!(p.token_ids[m + 2], SEP);
        prop_assert_eq!(*p.token_ids.last().unwrap(), EOS);
        prop_assert_eq!(p.arg1_ids(), &a1[..]);
        prop_assert_eq!(p.arg2_ids(), &a2[..]);
        let changes: Vec<usize> = (1..p.len()).filter(|&t| p.segment_ids[t] != p.segment_ids[t - 1]).collect();
        prop_assert_eq!(changes, vec![m + 2]);
    }

    #[test]
    fn segments_are_ignored_when_switched_off(a1 in ids(8), a2 in ids(8), flips in prop::collection::vec(any::<bool>(), 20), seed in 0u64..4) {
        let (store, enc) = small_encoder(false, seed);
        let p = TokenizedPair::from_ids(&a1, &a2).unwrap();
        let relabeled: Vec<usize> = p.segment_ids.iter().zip(flips.iter().cycle()).map(|(&s, &f)| if f { 1 - s } else { s }).collect();
        let run = |segs: &[usize]| {
            let mut g = Graph::new(&store);
            let e = enc.embed(&mut g, &p.token_ids, segs).unwrap();
            let h = enc.encode(&mut g, e, None, &mut ForwardCtx::eval()).unwrap();
            g.value(h).to_vec()
        };
        prop_assert_eq!(run(&p.segment_ids), run(&relabeled));
    }

    #[test]
    fn padding_content_does_not_leak(a1 in ids(6), a2 in ids(6), extra in 1usize..5, noise in matrix(4, 8, 5.0), seed in 0u64..4) {
        let (store, enc) = small_encoder(true, seed);
        let p = TokenizedPair::from_ids(&a1, &a2).unwrap();
        let (tok, segs, pad) = p.padded(p.len() + extra);
        let run = |perturb: bool| {
            let mut g = Graph::new(&store);
            let e = enc.embed(&mut g, &tok, &segs).unwrap();
            let mut t = g.tensor(e);
            if perturb {
                let d = t.shape()[1];
                for (k, r) in (p.len()..tok.len()).enumerate() {
                    t.data_mut()[r * d..(r + 1) * d].copy_from_slice(noise.row(k % 4));
                }
            }
            let ev = g.constant(&t);
            let h = enc.encode(&mut g, ev, Some(&pad), &mut ForwardCtx::eval()).unwrap();
            g.value(h)[..p.len() * 8].to_vec()
        };
        prop_assert_eq!(run(false), run(true));
    }
}

// --------------------------------------------------------------- matching

fn match_case() -> impl Strategy<Value = (Tensor, Tensor, usize, u64)> {
    (0usize..5, 0usize..5, 2usize..6, 1usize..4, any::<u64>()).prop_flat_map(|(m, n, d, l, seed)| {
        (matrix(m + 2, d, 2.0), matrix(n + 2, d, 2.0), Just(l), Just(seed))
    })
}

fn weights(d: usize, l: usize, seed: u64) -> (ParamStore, MatchWeights) {
    let mut store = ParamStore::new();
    let w = MatchWeights::new(&mut store, MatchConfig { perspectives: l, d_model: d }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, w)
}

proptest! {
    #[test]
    fn multi_cos_is_bounded(v in prop::collection::vec(-1e6f64..1e6, 1..8), u in prop::collection::vec(-1e-6f64..1e-6, 8), w in matrix(3, 8, 3.0)) {
        let d = v.len();
        let w = Tensor::new(vec![3, d], w.data()[..3 * d].to_vec()).unwrap();
        for out in [multi_cos_values(&v, &u[..d], &w).unwrap(), multi_cos_values(&v, &v, &w).unwrap(), multi_cos_values(&v, &vec![0.0; d], &w).unwrap()] {
            prop_assert!(out.iter().all(|c| c.abs() <= 1.0 + 1e-9));
        }
    }

    #[test]
    fn bilateral_symmetry((h1, h2, l, seed) in match_case()) {
        let (store, w) = weights(h1.shape()[1], l, seed);
        let (a1, a2) = bilateral_match_tensors(&store, &w, &h1, &h2).unwrap();
        let (b1, b2) = bilateral_match_tensors(&store, &w, &h2, &h1).unwrap();
        prop_assert_eq!(a1, b2);
        prop_assert_eq!(a2, b1);
    }

    #[test]
    fn other_argument_interior_order_is_irrelevant((h1, h2, l, seed) in match_case(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (store, w) = weights(h1.shape()[1], l, seed);
        let (rows, d) = (h2.shape()[0], h2.shape()[1]);
        let mut order: Vec<usize> = (1..rows - 1).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let mut data = h2.row(0).to_vec();
        for &r in &order {
            data.extend_from_slice(h2.row(r));
        }
        data.extend_from_slice(h2.row(rows - 1));
        let shuffled = Tensor::new(vec![rows, d], data).unwrap();
        let (a1, _) = bilateral_match_tensors(&store, &w, &h1, &h2).unwrap();
        let (b1, _) = bilateral_match_tensors(&store, &w, &h1, &shuffled).unwrap();
        for (x, y) in a1.data().iter().zip(b1.data()) {
            prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
        }
    }
}

// ---------------------------------------------------------------- metrics

fn labelled(gold: Vec<Vec<usize>>) -> Vec<DiscourseInstance> {
    let s = LabelSchema::pdtb4();
    gold.into_iter().map(|g| DiscourseInstance::new("a", "b", g, Split::Test, &s).unwrap()).collect()
}

fn gold_sets() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(subsequence(vec![0usize, 1, 2, 3], 1..=2), 1..40)
}

proptest! {
    #[test]
    fn metrics_ignore_instance_order(gold in gold_sets(), preds_seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::{Rng, seq::SliceRandom};
        let s = LabelSchema::pdtb4();
        let mut rng = ChaCha8Rng::seed_from_u64(preds_seed);
        let preds: Vec<usize> = (0..gold.len()).map(|_| rng.gen_range(0..4)).collect();
        let data = labelled(gold);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let pdata: Vec<_> = order.iter().map(|&i| data[i].clone()).collect();
        let ppreds: Vec<_> = order.iter().map(|&i| preds[i]).collect();
        prop_assert_eq!(accuracy(&preds, &data).unwrap(), accuracy(&ppreds, &pdata).unwrap());
        let (f, _) = macro_f1(&preds, &data, &s).unwrap();
        let (pf, _) = macro_f1(&ppreds, &pdata, &s).unwrap();
        prop_assert!((f - pf).abs() < 1e-12);
    }

    #[test]
    fn single_gold_accuracy_is_micro_recall(gold in prop::collection::vec(0usize..4, 1..40), preds in prop::collection::vec(0usize..4, 40)) {
        let preds = &preds[..gold.len()];
        let data = labelled(gold.iter().map(|&g| vec![g]).collect());
        let cm = confusion_matrix(preds, &data, 4).unwrap();
        let diag: u64 = (0..4).map(|k| cm[k][k]).sum();
        prop_assert_eq!(accuracy(preds, &data).unwrap(), diag as f64 / gold.len() as f64);
    }

    #[test]
    fn one_vs_rest_partitions_memberships(gold in gold_sets()) {
        let s = LabelSchema::pdtb4();
        let data = labelled(gold);
        for (c, name) in s.labels.iter().enumerate() {
            let (bin, _) = one_vs_rest(&data, &s, name).unwrap();
            for (orig, b) in data.iter().zip(&bin) {
                prop_assert_eq!(b.labels[0] == 0, orig.labels.contains(&c));
            }
        }
    }

    #[test]
    fn dataset_text_roundtrips(rows in prop::collection::vec(("[a-z]{1,6}( [a-z]{1,6}){0,4}", "[a-z]{1,6}( [a-z]{1,6}){0,4}", subsequence(vec!["Comparison", "Contingency", "Exp.", "Temporal.Asynchronous"], 1..=2), prop::sample::select(vec!["train", "dev", "test", "validation"])), 0..12), newline in any::<bool>()) {
        let mut text = String::from(bmgf::data::HEADER);
        for (a1, a2, labels, split) in &rows {
            text.push('\n');
            text.push_str(&format!("{split}\t{}\t{a1}\t{a2}", labels.join("|")));
        }
        if newline {
            text.push('\n');
        }
        let ds = Dataset::parse(&text, &LabelSchema::pdtb4(), "prop").unwrap();
        prop_assert_eq!(ds.to_tsv(), text);
    }
}

// ----------------------------------------------------------------- wiring

#[test]
fn ablation_switches_remove_their_parameters() {
    let schema = LabelSchema::pdtb4();
    let data = labelled(vec![vec![0]]);
    let base = ModelConfig { d_model: 8, encoder_heads: 2, ff_dim: 8, perspectives: 2, fusion_heads: 2, ..ModelConfig::default() };
    let names = |c: ModelConfig| -> Vec<String> {
        Model::from_instances(c, schema.clone(), &data).unwrap().store.names().map(String::from).collect()
    };
    let full = names(base.clone());
    assert!(full.iter().any(|n| n.starts_with("matching.")));
    assert!(full.iter().any(|n| n == "fusion.gate"));
    assert!(full.iter().any(|n| n.starts_with("fusion.attention.")));
    assert!(full.iter().any(|n| n.contains("segment")));

    let no_bm = names(ModelConfig { enable_matching: false, ..base.clone() });
    assert!(!no_bm.iter().any(|n| n.starts_with("matching.")));
    let no_gf = names(ModelConfig { enable_fusion: false, ..base.clone() });
    assert!(!no_gf.iter().any(|n| n.starts_with("fusion.")));
    let no_se = names(ModelConfig { use_segment_embeddings: false, ..base });
    assert!(!no_se.iter().any(|n| n.contains("segment")));
}

#[test]
fn default_config_serializes_the_reference_settings() {
    let text = ModelConfig::default().to_toml();
    for line in [
        "perspectives = 16",
        "fusion_heads = 16",
        "conv_count = 2",
        "conv_filters = 64",
        "classifier_hidden = 128",
        "dropout = 0.2",
        "clip = 2.0",
        "l2 = 0.0005",
        "lr = 0.001",
        "batch_size = 32",
        "epochs = 50",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }
    assert_eq!(ModelConfig::from_toml_str(&text).unwrap(), ModelConfig::default());
}
