use mtcnn::data::{build_vocab, encode, Event, EventSequence};
use mtcnn::embedding::PeMode;
use mtcnn::model::{count_params, window_mask, ModelConfig, MtcnnModel};
use mtcnn::train::{model_gradcheck, random_batch, tiny_config};
use mtcnn::{Error, Exec, Graph, Mode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eval_outputs(model: &MtcnnModel<f64>, batch: &mtcnn::data::EncodedBatch) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let f = model.forward_eval(&mut g, batch).unwrap();
    (g.value(f.shared).to_vec(), f.logits.iter().map(|&l| g.value(l).to_vec()).collect())
}

#[test]
fn default_param_count() {
    let c = count_params(&ModelConfig::default());
    assert_eq!(c.conv, 96_200);
    assert_eq!(c.batchnorm, 400);
    assert_eq!(c.fc1, 25_728);
    assert_eq!(c.fc2, 4_128);
    // 3 × (32·2 + 2)
    assert_eq!(c.heads, 198);
    assert_eq!(c.embeddings, 4_616);
    assert_eq!(c.positional, 0);
    assert_eq!(c.total, 96_200 + 400 + 25_728 + 4_128 + 198 + 4_616);
    assert_eq!(c.total, 131_270);
    let published = 137_000.0;
    assert!(c.total as f64 / published > 0.5 && (c.total as f64) / published < 2.0);

    let model = MtcnnModel::<f32>::new(ModelConfig::default(), &mut rng(0)).unwrap();
    assert_eq!(model.num_params(), 131_270);
}

#[test]
fn learnable_pe_adds_n_times_d() {
    let lpe = ModelConfig { pe_mode: PeMode::Learnable, ..ModelConfig::default() };
    assert_eq!(count_params(&lpe).total - count_params(&ModelConfig::default()).total, 1_600);
    let model = MtcnnModel::<f32>::new(lpe, &mut rng(0)).unwrap();
    assert_eq!(model.num_params(), 131_270 + 1_600);
}

#[test]
fn empty_kernel_list_is_rejected_but_counts_zero_conv() {
    let c = ModelConfig { kernel_sizes: vec![], channels: vec![], ..ModelConfig::default() };
    assert_eq!(count_params(&c).conv, 0);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

fn random_config(r: &mut ChaCha8Rng) -> ModelConfig {
    let n = r.random_range(4..40);
    let kernels = r.random_range(1..4);
    let d_page = r.random_range(1..6);
    let d_category = r.random_range(1..6);
    let mut d_time = r.random_range(1..4);
    let pe_mode = [PeMode::Fixed, PeMode::Learnable, PeMode::None][r.random_range(0..3)];
    if pe_mode == PeMode::Fixed && (d_page + d_category + d_time) % 2 == 1 {
        d_time += 1;
    }
    ModelConfig {
        max_len: n,
        page_vocab: r.random_range(1..60),
        category_vocab: r.random_range(1..20),
        d_page,
        d_category,
        d_time,
        kernel_sizes: (0..kernels).map(|_| r.random_range(1..=n)).collect(),
        channels: (0..kernels).map(|_| r.random_range(1..12)).collect(),
        fc1_dim: r.random_range(1..20),
        shared_dim: r.random_range(1..10),
        tasks: r.random_range(1..5),
        classes_per_task: 2,
        dropout_rate: 0.5,
        pe_mode,
    }
}

#[test]
fn closed_form_matches_enumeration_on_random_configs() {
    let mut r = rng(42);
    for _ in 0..20 {
        let c = random_config(&mut r);
        let model = MtcnnModel::<f64>::new(c.clone(), &mut r).unwrap();
        assert_eq!(count_params(&c).total, model.num_params(), "{c:?}");
    }
}

#[test]
fn default_forward_shapes() {
    let cfg = ModelConfig::default();
    let model = MtcnnModel::<f32>::new(cfg.clone(), &mut rng(1)).unwrap();
    let batch = random_batch(&cfg, 3, &mut rng(2));
    let mut g = Graph::new();
    let f = model.forward_eval(&mut g, &batch).unwrap();
    assert_eq!(g.shape(f.shared), &[3, 32]);
    assert_eq!(f.logits.len(), 3);
    for &l in &f.logits {
        assert_eq!(g.shape(l), &[3, 2]);
    }
}

#[test]
fn eval_is_deterministic_and_row_equivariant() {
    let cfg = tiny_config();
    let model = MtcnnModel::<f64>::new(cfg.clone(), &mut rng(3)).unwrap();
    let batch = random_batch(&cfg, 7, &mut rng(4));
    let a = eval_outputs(&model, &batch);
    assert_eq!(a, eval_outputs(&model, &batch));

    let perm = [4, 0, 6, 2, 1, 5, 3];
    let b = eval_outputs(&model, &batch.select(&perm));
    let s = cfg.shared_dim;
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(&b.0[i * s..(i + 1) * s], &a.0[p * s..(p + 1) * s]);
        for t in 0..cfg.tasks {
            assert_eq!(&b.1[t][i * 2..i * 2 + 2], &a.1[t][p * 2..p * 2 + 2]);
        }
    }
}

#[test]
fn train_mode_updates_running_stats_and_eval_does_not() {
    let cfg = tiny_config();
    let mut model = MtcnnModel::<f64>::new(cfg.clone(), &mut rng(5)).unwrap();
    let batch = random_batch(&cfg, 6, &mut rng(6));
    let before = model.bn_states().to_vec();
    model.forward_eval(&mut Graph::new(), &batch).unwrap();
    assert_eq!(model.bn_states(), &before[..]);
    model.forward_train(&mut Graph::new(), &batch, &mut rng(7)).unwrap();
    assert_ne!(model.bn_states(), &before[..]);
}

#[test]
fn full_model_gradient_check() {
    let start = std::time::Instant::now();
    let check = model_gradcheck(0).unwrap();
    assert!(check.report.max_rel_error <= 1e-4, "worst {} at {:e}", check.worst_name(), check.report.max_rel_error);
    assert_eq!(check.names.len(), check.report.per_param.len());
    assert!(check.names.iter().any(|n| n == "positional"));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn window_mask_counts() {
    // only the last k positions are real: windows overlapping them are kept
    let n = 10;
    for k in 1..=n {
        let valid: Vec<bool> = (0..n).map(|i| i >= n - k).collect();
        let m = window_mask(&valid, 1, n, k);
        let oracle = (0..=n - k).filter(|&t| (t..t + k).any(|i| valid[i])).count();
        assert_eq!(m.iter().filter(|&&x| x).count(), oracle);
        assert_eq!(oracle, k.min(n - k + 1));
    }
}

#[test]
fn all_padding_row_is_a_data_error() {
    let cfg = tiny_config();
    let model = MtcnnModel::<f64>::new(cfg.clone(), &mut rng(8)).unwrap();
    let mut batch = random_batch(&cfg, 2, &mut rng(9));
    for m in &mut batch.valid_mask[..cfg.max_len] {
        *m = false;
    }
    let r = model.forward_eval(&mut Graph::new(), &batch);
    assert!(matches!(r, Err(Error::Data(_))));
}

fn sequence(len: usize, r: &mut ChaCha8Rng) -> EventSequence {
    EventSequence {
        record_id: "x".into(),
        events: (0..len)
            .map(|_| Event {
                page: format!("p{}", r.random_range(0..20)),
                category: format!("c{}", r.random_range(0..5)),
                dwell_ms: r.random_range(10.0..20_000.0),
            })
            .collect(),
        labels: vec![0, 1],
        amount_usd: 5.0,
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        max_len: 16,
        page_vocab: 20,
        category_vocab: 5,
        d_page: 3,
        d_category: 2,
        d_time: 1,
        kernel_sizes: vec![2, 5],
        channels: vec![4, 3],
        fc1_dim: 6,
        shared_dim: 4,
        tasks: 2,
        classes_per_task: 2,
        dropout_rate: 0.5,
        pe_mode: PeMode::Fixed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn truncation_consistency(len in 17usize..60, seed in 0u64..1000) {
        let cfg = small_config();
        let mut r = rng(seed);
        let long = sequence(len, &mut r);
        let mut short = long.clone();
        short.events = long.events[len - cfg.max_len..].to_vec();
        let vocab = build_vocab(std::slice::from_ref(&long), 1).unwrap();
        let model = MtcnnModel::<f64>::new(ModelConfig {
            page_vocab: vocab.size(mtcnn::data::Variable::Page),
            category_vocab: vocab.size(mtcnn::data::Variable::Category),
            ..cfg.clone()
        }, &mut r).unwrap();
        let a = encode(&vocab, &[long], cfg.max_len, 2, Exec::Sequential).unwrap();
        let b = encode(&vocab, &[short], cfg.max_len, 2, Exec::Sequential).unwrap();
        prop_assert_eq!(eval_outputs(&model, &a), eval_outputs(&model, &b));
    }

    #[test]
    fn padding_robustness(len in 5usize..16, extra in 1usize..30, seed in 0u64..1000) {
        // Extra padding-only prefix beyond N cannot change the encoded row or the output.
        let cfg = small_config();
        let mut r = rng(seed);
        let rec = sequence(len, &mut r);
        let vocab = build_vocab(std::slice::from_ref(&rec), 1).unwrap();
        let model = MtcnnModel::<f64>::new(ModelConfig {
            page_vocab: vocab.size(mtcnn::data::Variable::Page),
            category_vocab: vocab.size(mtcnn::data::Variable::Category),
            ..cfg.clone()
        }, &mut r).unwrap();
        let a = encode(&vocab, std::slice::from_ref(&rec), cfg.max_len, 2, Exec::Sequential).unwrap();
        let base = eval_outputs(&model, &a);
        let mut padded = a.clone();
        let n = cfg.max_len;
        let (ids, mask) = mtcnn::data::pad_truncate(
            &[vec![0usize; extra], a.page_ids.clone()].concat(), n, 0);
        prop_assert_eq!(&ids, &a.page_ids);
        prop_assert_eq!(&mask, &vec![true; n]);
        padded.page_ids = ids;
        prop_assert_eq!(eval_outputs(&model, &padded), base);
    }

    #[test]
    fn feature_width_is_channel_sum(n in 8usize..30, k1 in 1usize..8, k2 in 1usize..8, c1 in 1usize..6, c2 in 1usize..6) {
        let cfg = ModelConfig { max_len: n, kernel_sizes: vec![k1, k2], channels: vec![c1, c2], ..small_config() };
        let model = MtcnnModel::<f64>::new(cfg.clone(), &mut rng(0)).unwrap();
        let params = model.named_params();
        let fc1 = params.iter().find(|(name, _)| name == "fc1.weight").unwrap();
        prop_assert_eq!(fc1.1.shape()[0], c1 + c2);
        prop_assert_eq!(cfg.feature_dim(), c1 + c2);
        let batch = random_batch(&cfg, 2, &mut rng(1));
        let mut g = Graph::new();
        prop_assert!(model.forward(&mut g, &batch, Mode::Eval, &mut rng(2), &mut model.bn_states().to_vec()).is_ok());
    }
}

#[test]
fn export_scores_are_probabilities_and_repeatable() {
    let cfg = tiny_config();
    let model = MtcnnModel::<f32>::new(cfg.clone(), &mut rng(10)).unwrap();
    let mut batch = random_batch(&cfg, 9, &mut rng(11));
    // duplicate a record to check identical exports
    batch = batch.select(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 2]);
    let a = model.export_embedding(&batch, 4).unwrap();
    assert_eq!(a.len(), 10);
    for e in &a {
        assert_eq!(e.vector.len(), cfg.shared_dim);
        assert!(e.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }
    assert_eq!(a[2].scores, a[9].scores);
    assert_eq!(a[2].vector, a[9].vector);
    assert_eq!(a, model.export_embedding(&batch, 3).unwrap());
}
