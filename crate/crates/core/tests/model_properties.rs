use atcl::autodiff::{grad_check_many, Graph, Tensor, Var};
use atcl::model::{Architecture, AnchorSide, Bound, Model, ModelConfig, ModelParameters};
use atcl::text::{nmt_batch, Batch, Targets, TokenMatrix};

fn lm_batch(rows: &[Vec<usize>], targets: &[Vec<usize>]) -> Batch {
    Batch {
        source: TokenMatrix::from_rows(rows).unwrap(),
        targets: Targets::NextToken(TokenMatrix::from_rows(targets).unwrap()),
    }
}

/// Parameters filled from `0.5 sin(0.7 k + 0.3)` over the flat canonical index.
fn formula_model(config: ModelConfig) -> Model {
    let template = Model::init(config.clone(), 0).unwrap();
    let mut k = 0usize;
    let entries = template
        .params
        .entries()
        .iter()
        .map(|(name, t)| {
            let data = (0..t.numel()).map(|i| 0.5 * (0.7 * (k + i) as f64 + 0.3).sin()).collect();
            k += t.numel();
            (name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect();
    Model::from_parameters(config, ModelParameters::from_entries(entries).unwrap()).unwrap()
}

fn loss_of(model: &Model, batch: &Batch) -> f64 {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let f = model.forward(&mut g, &b, batch).unwrap();
    g.value(f.loss).item()
}

fn zero_head(model: &mut Model) {
    for name in ["head.weight", "head.bias"] {
        let i = model.params.index_of(name).unwrap();
        model.params.tensor_mut(i).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

#[test]
fn fixed_weight_loss_matches_high_precision_recomputation() {
    let cfg = ModelConfig { ff_dim: 4, ..ModelConfig::lm(6, 4, 2, 1) };
    let model = formula_model(cfg);
    let batch = lm_batch(&[vec![4, 5, 4, 5], vec![5, 4]], &[vec![5, 4, 5, 3], vec![4, 3]]);
    // 40-digit recomputation of the same network.
    let expected = 1.786_567_832_044_792_6;
    let got = loss_of(&model, &batch);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn zeroed_head_predicts_uniformly() {
    let mut lm = Model::init(ModelConfig::lm(11, 8, 2, 2), 4).unwrap();
    zero_head(&mut lm);
    let batch = lm_batch(&[vec![4, 5, 6], vec![7, 8, 9]], &[vec![5, 6, 3], vec![8, 9, 3]]);
    assert!((loss_of(&lm, &batch) - (11f64).ln()).abs() < 1e-12);

    let mut nmt = Model::init(ModelConfig::seq2seq(9, 8, 2, 1, 1), 4).unwrap();
    zero_head(&mut nmt);
    let batch = nmt_batch(&[&(vec![4, 5], vec![5, 4]), &(vec![6], vec![6, 7, 8])]).unwrap();
    assert!((loss_of(&nmt, &batch) - (9f64).ln()).abs() < 1e-12);
}

#[test]
fn same_token_at_two_positions_embeds_differently() {
    let model = Model::init(ModelConfig::lm(8, 8, 2, 1), 1).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let tokens = TokenMatrix::from_rows(&[vec![5, 5]]).unwrap();
    let e = model.embed(&mut g, &b, &tokens).unwrap();
    let v = g.value(e);
    assert_ne!(v.row(0), v.row(1));
    let table = model.params.get("embed.source").unwrap();
    let pos = atcl::model::positional_table(2, 8);
    for c in 0..8 {
        assert_eq!(v.row(0)[c], table.row(5)[c] + pos[c]);
        assert_eq!(v.row(1)[c], table.row(5)[c] + pos[8 + c]);
    }
}

#[test]
fn future_positions_get_exactly_zero_gradient() {
    let model = Model::init(ModelConfig::lm(12, 8, 2, 2), 9).unwrap();
    let ids = vec![4, 7, 5, 9, 10, 6];
    let n = ids.len();
    for i in 0..n {
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let tokens = TokenMatrix::from_rows(std::slice::from_ref(&ids)).unwrap();
        let e = model.embed(&mut g, &b, &tokens).unwrap();
        let (_, logits) = model.lm_from_embedded(&mut g, &b, &tokens, e).unwrap();
        let mut targets = vec![None; n];
        targets[i] = Some(3);
        let loss = g.cross_entropy(logits, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let ge = grads.get_or_zeros(e);
        for j in 0..n {
            let row = &ge[j * 8..(j + 1) * 8];
            if j > i {
                assert!(row.iter().all(|&x| x == 0.0), "position {j} leaks into {i}");
            } else {
                assert!(row.iter().any(|&x| x != 0.0), "position {j} should influence {i}");
            }
        }
    }
}

#[test]
fn padded_ids_do_not_change_the_loss() {
    let model = Model::init(ModelConfig::lm(12, 8, 2, 2), 2).unwrap();
    let base = lm_batch(&[vec![4, 5, 6, 7], vec![8, 9]], &[vec![5, 6, 7, 3], vec![9, 3]]);
    let reference = loss_of(&model, &base);
    for filler in [1, 4, 11] {
        let mut b = base.clone();
        for (id, p) in b.source.ids.iter_mut().zip(&b.source.pad) {
            if *p {
                *id = filler;
            }
        }
        assert_eq!(loss_of(&model, &b).to_bits(), reference.to_bits());
    }
}

#[test]
fn batch_rows_are_independent() {
    let model = Model::init(ModelConfig::lm(12, 8, 2, 2), 5).unwrap();
    let rows = [vec![4, 5, 6], vec![7, 8, 9], vec![10, 11, 4]];
    let hidden = |order: &[usize]| {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let r: Vec<Vec<usize>> = order.iter().map(|&i| rows[i].clone()).collect();
        let batch = lm_batch(&r, &r);
        let f = model.forward(&mut g, &b, &batch).unwrap();
        g.value(f.hidden).clone()
    };
    let a = hidden(&[0, 1, 2]);
    let p = hidden(&[2, 0, 1]);
    for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
        for pos in 0..3 {
            let (x, y) = (p.row(dst * 3 + pos), a.row(src * 3 + pos));
            assert!(x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }
}

#[test]
fn single_position_sees_only_itself() {
    let model = Model::init(ModelConfig::lm(12, 8, 2, 1), 5).unwrap();
    let run = |rows: &[Vec<usize>]| {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let f = model.forward(&mut g, &b, &lm_batch(rows, rows)).unwrap();
        g.value(f.hidden).row(0).to_vec()
    };
    assert_eq!(run(&[vec![6]]), run(&[vec![6], vec![9]]));
}

#[test]
fn decoder_prefix_is_unaffected_by_later_targets() {
    let model = Model::init(ModelConfig::seq2seq(14, 8, 2, 2, 2), 3).unwrap();
    let src = vec![4, 5, 6, 7];
    let trg = vec![8, 9, 10, 11, 12];
    let logits = |trg: &[usize]| {
        let batch = nmt_batch(&[&(src.clone(), trg.to_vec())]).unwrap();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let f = model.forward(&mut g, &b, &batch).unwrap();
        g.value(f.logits).clone()
    };
    let base = logits(&trg);
    for m in 0..trg.len() {
        let mut edited = trg.clone();
        edited[m] = 13;
        let other = logits(&edited);
        // Row t predicts y_{t+1} from <s> y_1..y_t, so rows 0..=m are fixed.
        for t in 0..=m {
            assert_eq!(base.row(t), other.row(t), "edit at {m} moved row {t}");
        }
        assert_ne!(base.row(m + 1), other.row(m + 1));
    }
}

fn check_all_parameters(model: &Model, batch: &Batch) {
    let points: Vec<Tensor> = model.params.entries().iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check_many(
        |g: &mut Graph, vars: &[Var]| {
            let b = Bound { vars: vars.to_vec() };
            Ok(model.forward(g, &b, batch)?.loss)
        },
        &points,
        1e-4,
    )
    .unwrap();
    for (t, (name, _)) in report.tensors.iter().zip(model.params.entries()) {
        assert!(t.passed, "{name}: relative error {}", t.max_relative_error);
    }
}

#[test]
fn lm_parameter_gradients_match_finite_differences() {
    let cfg = ModelConfig { ff_dim: 16, ..ModelConfig::lm(10, 8, 2, 2) };
    let model = Model::init(cfg, 21).unwrap();
    let batch = lm_batch(&[vec![4, 5, 6, 7], vec![8, 9, 4]], &[vec![5, 6, 7, 3], vec![9, 4, 3]]);
    check_all_parameters(&model, &batch);
}

#[test]
fn seq2seq_parameter_gradients_match_finite_differences() {
    let cfg = ModelConfig { ff_dim: 8, ..ModelConfig::seq2seq(9, 8, 2, 1, 1) };
    let model = Model::init(cfg, 22).unwrap();
    let batch = nmt_batch(&[&(vec![4, 5, 6], vec![6, 5]), &(vec![7], vec![8, 7, 4])]).unwrap();
    check_all_parameters(&model, &batch);
}

#[test]
fn anchors_follow_the_configured_side() {
    let mut cfg = ModelConfig::seq2seq(9, 8, 2, 1, 1);
    let batch = nmt_batch(&[&(vec![4, 5, 6], vec![6]), &(vec![7], vec![8, 7, 4])]).unwrap();
    for (side, rows) in [(AnchorSide::Encoder, 2 * 4), (AnchorSide::Decoder, 2 * 4)] {
        cfg.anchor_side = side;
        let model = Model::init(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let f = model.forward(&mut g, &b, &batch).unwrap();
        assert_eq!(g.value(f.anchors).rows(), rows);
        let row = model.anchor_row(&batch, 0, 2);
        match side {
            AnchorSide::Encoder => assert_eq!(row, 2),
            // Target of sentence 0 has length 2 (<s> y), so index 2 clamps to 1.
            AnchorSide::Decoder => assert_eq!(row, 1),
        }
    }
}

#[test]
fn checkpoint_file_round_trips_and_rejects_shape_changes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = Model::init(ModelConfig::lm(10, 8, 2, 2), 7).unwrap();
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(std::fs::read(&path).unwrap(), loaded.to_bytes());

    let mut cfg = model.config.clone();
    cfg.architecture = Architecture::Lm { layers: 1 };
    assert!(Model::from_parameters(cfg, model.params.clone()).is_err());

    let text = String::from_utf8_lossy(&std::fs::read(&path).unwrap()).to_string();
    let tampered = text.replacen("embed.source 10 8", "embed.source 8 10", 1);
    assert!(Model::from_bytes(tampered.as_bytes()).is_err());
}
