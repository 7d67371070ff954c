use selfcrit_core::harness::config::ExperimentConfig;
use selfcrit_core::harness::stages::{
    load_stage_checkpoint, prepare, run_stages, RunOptions, Stage, TrainConfig,
};
use selfcrit_core::harness::synthetic::{gen_synthetic, SyntheticConfig};
use selfcrit_core::harness::toyqa::{
    gen_toy_qa, template_ids, template_prior, ToyCorpus, ToyQaConfig,
};
use selfcrit_core::models::{Checkpoint, QaConfig, QaModel};
use selfcrit_core::proposal::{proposals_for_record, LexiconTagger, ProposalParams};

/// 99% two-sided binomial interval half-width.
fn binomial_band(n: usize, p: f64) -> f64 {
    2.576 * (n as f64 * p * (1.0 - p)).sqrt()
}

#[test]
fn synthetic_class_balance() {
    let cfg = SyntheticConfig::default();
    let (train, test) = gen_synthetic(&cfg, 0.5).unwrap();
    for d in [&train, &test] {
        let [zeros, _] = d.class_counts();
        assert!(
            (zeros as f64 - 500.0).abs() <= binomial_band(1000, 0.5),
            "{zeros}"
        );
    }
    let (train, test) = gen_synthetic(&cfg, 0.05).unwrap();
    let [minority, _] = train.class_counts();
    assert!(
        (minority as f64 - 50.0).abs() <= binomial_band(1000, 0.05),
        "{minority}"
    );
    let [_, test_minority] = test.class_counts();
    assert!(
        (test_minority as f64 - 50.0).abs() <= binomial_band(1000, 0.05),
        "{test_minority}"
    );
}

#[test]
fn synthetic_generation_is_deterministic() {
    let cfg = SyntheticConfig::default();
    assert_eq!(
        gen_synthetic(&cfg, 0.1).unwrap(),
        gen_synthetic(&cfg, 0.1).unwrap()
    );
    let other = SyntheticConfig {
        seed: 1,
        ..cfg.clone()
    };
    assert_ne!(
        gen_synthetic(&cfg, 0.1).unwrap().0,
        gen_synthetic(&other, 0.1).unwrap().0
    );
}

#[test]
fn toy_priors() {
    for t in 0..template_ids().len() {
        assert_eq!(template_prior(0.0, t, false), template_prior(0.0, t, true));
        let train = template_prior(1.0, t, false);
        let test = template_prior(1.0, t, true);
        let major = (0..4).find(|&a| train[a] == 1.0).unwrap();
        assert_eq!(test[major], 0.0);
    }
}

fn small_corpus(seed: u64, shift: f64) -> ToyCorpus {
    gen_toy_qa(&ToyQaConfig {
        train_size: 200,
        test_size: 100,
        shift,
        seed,
        ..ToyQaConfig::default()
    })
    .unwrap()
}

#[test]
fn toy_generation_is_deterministic() {
    let a = small_corpus(3, 0.8);
    let b = small_corpus(3, 0.8);
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!(
        a.embeddings.to_glove_string(),
        b.embeddings.to_glove_string()
    );
}

#[test]
fn causal_object_is_usually_proposed() {
    let corpus = small_corpus(0, 0.8);
    let tagger = LexiconTagger::bundled();
    let params = ProposalParams::default();
    let (mut hit, mut total) = (0, 0);
    for rec in corpus.train.iter().chain(&corpus.test) {
        let p = proposals_for_record(rec, &params, &corpus.embeddings, &tagger).unwrap();
        total += 1;
        hit += usize::from(rec.causal_object.is_some_and(|c| p.indices.contains(&c)));
        assert!(p.len() <= params.size);
    }
    assert!(hit as f64 >= 0.95 * total as f64, "{hit}/{total}");
}

#[test]
fn corpus_round_trips_through_disk() {
    let corpus = small_corpus(1, 0.8);
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let back = ToyCorpus::load(dir.path()).unwrap();
    assert_eq!(back.train, corpus.train);
    assert_eq!(back.test, corpus.test);
    assert_eq!(back.meta, corpus.meta);
    assert_eq!(
        back.embeddings.to_glove_string(),
        corpus.embeddings.to_glove_string()
    );
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = QaConfig {
        vocab_size: 11,
        word_dim: 4,
        hidden: 5,
        object_dim: 3,
        joint_dim: 4,
        num_answers: 6,
        max_question_len: 5,
    };
    let model = QaModel::new(cfg, 9).unwrap();
    let ckpt = Checkpoint {
        meta: serde_json::json!({ "note": "test" }),
        params: model.params.clone(),
    };
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

fn quick_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.pretrain.epochs = 3;
    cfg.strengthen.epochs = 2;
    cfg.joint.epochs = 2;
    cfg
}

#[test]
fn zero_weight_stages_stay_near_pretrain() {
    let corpus = small_corpus(2, 0.8);
    let mut cfg = quick_config();
    for s in [Stage::Strengthen, Stage::Joint] {
        cfg.stage_mut(s).lambda_infl = 0.0;
        cfg.stage_mut(s).lambda_crit = 0.0;
    }
    let prep = prepare(&corpus, &cfg).unwrap();
    let out = run_stages(&prep, &cfg, &RunOptions::default()).unwrap();
    let pre = &out.reports[0].test;
    let last = &out.reports[2].test;
    assert!(
        (pre.soft_score - last.soft_score).abs() <= 0.02,
        "{} vs {}",
        pre.soft_score,
        last.soft_score
    );
    assert!(
        (pre.fsr - last.fsr).abs() <= 0.03,
        "{} vs {}",
        pre.fsr,
        last.fsr
    );
}

#[test]
fn stages_write_and_resume_from_checkpoints() {
    let corpus = small_corpus(4, 0.8);
    let cfg = quick_config();
    let prep = prepare(&corpus, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let full = run_stages(&prep, &cfg, &opts).unwrap();
    for s in Stage::ALL {
        for f in [
            s.checkpoint_file(),
            format!("{s}_log.csv"),
            format!("{s}_epochs.csv"),
            format!("{s}_eval.json"),
        ] {
            assert!(dir.path().join(&f).exists(), "{f}");
        }
        let loaded = load_stage_checkpoint(&dir.path().join(s.checkpoint_file())).unwrap();
        let (_, model) = full.models.iter().find(|(st, _)| *st == s).unwrap();
        assert_eq!(&loaded, model);
    }
    // Re-running only the joint stage from the saved strengthen checkpoint
    // reproduces the full run.
    let joint = run_stages(
        &prep,
        &cfg,
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            from: Some(Stage::Joint),
            until: Some(Stage::Joint),
        },
    )
    .unwrap();
    assert_eq!(joint.models[0].1, full.models[2].1);
}

#[test]
fn missing_proposals_block_the_influence_stages() {
    let corpus = small_corpus(5, 0.8);
    let mut cfg = quick_config();
    cfg.proposal = ProposalParams {
        threshold: 1.5,
        ..ProposalParams::default()
    };
    let prep = prepare(&corpus, &cfg).unwrap();
    assert!(prep.train_proposals.iter().all(Option::is_none));
    assert!(run_stages(&prep, &cfg, &RunOptions::default()).is_err());
}

#[test]
fn config_file_sections() {
    let cfg = ExperimentConfig::parse(
        "[toyqa]\nshift = 0.0\ntrain_size = 300\n\n[train]\nbatch_size = 16\nseed = 7\n\n[train.pretrain]\nepochs = 4\nlr = 1e-3\n",
    )
    .unwrap();
    assert_eq!(cfg.toyqa.shift, 0.0);
    assert_eq!(cfg.toyqa.train_size, 300);
    assert_eq!(cfg.train.batch_size, Some(16));
    assert_eq!(cfg.train.pretrain.epochs, 4);
    assert_eq!(cfg.train.joint, TrainConfig::default().joint);
    assert!(ExperimentConfig::parse("[train.pretrain]\nepochs = 4\nlr = 10e-3\n").is_err());
    assert!(ExperimentConfig::parse("[toyqa]\nshift = 1.5\n")
        .unwrap_err()
        .is_config_error());
    assert!(ExperimentConfig::parse("[nonsense]\n").is_err());
}
