use super::*;
use crate::autodiff::Graph;
use crate::motion::{motion_from_csv, motion_from_json, motion_to_csv, motion_to_json, CorpusConfig, TOY_FPS};
use crate::vq::{stage1_loss, straight_through, CodeSequence};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusConfig {
        n_classes: 2,
        samples_per_class: 8,
        min_len: 8,
        max_len: 16,
        downsample_rate: 4,
        noise: 0.01,
    };
    cfg.stage1.d_model = 8;
    cfg.stage1.heads = 2;
    cfg.stage1.tcn_channels = vec![8, 8];
    cfg.stage1.codes = 8;
    cfg.stage1.code_dim = 4;
    cfg.stage1.steps = 6;
    cfg.stage1.batch_size = 2;
    cfg.stage2.d_model = 8;
    cfg.stage2.heads = 2;
    cfg.stage2.d_text = 8;
    cfg.stage2.max_codes = 8;
    cfg.stage2.steps = 4;
    cfg.stage2.batch_size = 2;
    cfg
}

fn corpus(cfg: &RunConfig) -> Vec<CorpusSample> {
    generate_synthetic_corpus(cfg.seed, &cfg.corpus).unwrap()
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let partial = RunConfig::from_toml("seed = 7\n[stage2]\nsteps = 3\n").unwrap();
    assert_eq!(partial.seed, 7);
    assert_eq!(partial.stage2.steps, 3);
    assert_eq!(partial.stage1, Stage1Config::default());
}

#[test]
fn config_errors_name_the_key() {
    let key = |text: &str| match RunConfig::from_toml(text) {
        Err(Error::Config { key, .. }) => key,
        other => panic!("expected config error, got {other:?}"),
    };
    assert_eq!(key("[stage2]\nmax_codes = \"many\"\n"), "stage2.max_codes");
    assert_eq!(key("[stage1]\nalpha = -1.0\n"), "stage1.alpha");
    assert_eq!(key("[stage1]\nheads = 3\n"), "stage1.heads");
    assert_eq!(key("[stage2]\nlr = 0.0\n"), "stage2.lr");
    assert_eq!(key("[stage1]\ndownsample_rate = 8\ntcn_channels = [8, 8, 8]\n"), "corpus.downsample_rate");
    assert!(key("[stage1]\nbogus = 1\n").starts_with("stage1"));
}

#[test]
fn missing_config_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nope.toml");
    match RunConfig::load(&path) {
        Err(Error::MissingInput(p)) => assert_eq!(p, path),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ablation_names_parse() {
    for a in Ablation::ALL {
        assert_eq!(Ablation::parse(a.name()).unwrap(), a);
    }
    assert!(matches!(Ablation::parse("spatial"), Err(Error::Config { .. })));
    let cfg = RunConfig::default().with_ablation(Ablation::Local);
    assert!(cfg.stage2.ablate_local && !cfg.stage2.ablate_global && !cfg.stage1.ablate_bpst);
}

#[test]
fn hash_split_is_stable_and_roughly_a_fifth() {
    let (train, held) = split_indices(1000);
    assert_eq!(train.len() + held.len(), 1000);
    assert!((150..=250).contains(&held.len()), "{}", held.len());
    let (_, held_small) = split_indices(100);
    assert!(held_small.iter().all(|i| held.contains(i)));
}

#[test]
fn stream_rngs_are_independent() {
    use rand::Rng;
    let a: u64 = stream_rng(1, 2, 3).gen();
    assert_eq!(a, stream_rng(1, 2, 3).gen::<u64>());
    assert_ne!(a, stream_rng(1, 2, 4).gen::<u64>());
    assert_ne!(a, stream_rng(1, 3, 3).gen::<u64>());
    assert_ne!(a, stream_rng(2, 2, 3).gen::<u64>());
}

#[test]
fn epoch_batches_cover_each_pass_once() {
    let pool: Vec<usize> = (10..17).collect();
    let whole = data::epoch_batch(&pool, 4, 6, 0, 21);
    for pass in whole.chunks(7) {
        let mut seen = pass.to_vec();
        seen.sort_unstable();
        assert_eq!(seen, pool);
    }
    assert_ne!(whole[..7], whole[7..14]);
    assert_eq!(data::epoch_batch(&pool, 4, 6, 5, 6), whole[5..11]);
}

#[test]
fn centroid_classifier_separates_raw_motions() {
    let mut cfg = tiny();
    cfg.corpus.n_classes = 4;
    let samples = corpus(&cfg);
    let (train, held) = split_indices(samples.len());
    let refs: Vec<_> = train.iter().map(|&i| &samples[i]).collect();
    let clf = CentroidClassifier::fit(&refs, 4).unwrap();
    for i in held {
        assert_eq!(clf.predict(samples[i].motion.frames()), samples[i].class);
    }
}

#[test]
fn feature_norm_inverts() {
    let samples = corpus(&tiny());
    let norm = FeatureNorm::fit(samples.iter().map(|s| s.motion.frames())).unwrap();
    let f = samples[3].motion.frames();
    let back = norm.denormalize(&norm.normalize(f).unwrap()).unwrap();
    for (a, b) in back.data().iter().zip(f.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(norm.std.data().iter().all(|&s| s >= NORM_STD_FLOOR));
    let mut g = Graph::new();
    let x = g.constant(norm.normalize(f).unwrap());
    let y = norm.denormalize_graph(&mut g, x).unwrap();
    for (a, b) in g.value(y).data().iter().zip(f.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn resumed_stage1_matches_uninterrupted() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let mut full = Stage1Trainer::new(&cfg.stage1, &samples, cfg.seed).unwrap();
    full.train_until(&samples, 6).unwrap();

    let mut first = Stage1Trainer::new(&cfg.stage1, &samples, cfg.seed).unwrap();
    first.train_until(&samples, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.json");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Stage1Trainer::resume(&Checkpoint::load(&path).unwrap(), &samples).unwrap();
    resumed.train_until(&samples, 6).unwrap();

    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.model.book, full.model.book);
    assert_eq!(resumed.adam, full.adam);
    assert_eq!(resumed.curve[..], full.curve[3..]);
}

#[test]
fn resume_without_ema_keeps_codebook_in_sync() {
    let mut cfg = tiny();
    cfg.stage1.ema = false;
    let samples = corpus(&cfg);
    let mut t = Stage1Trainer::new(&cfg.stage1, &samples, cfg.seed).unwrap();
    t.train_until(&samples, 3).unwrap();
    assert_eq!(t.model.params.require("vq.codebook").unwrap(), t.model.book.vectors());
    let mut r = Stage1Trainer::resume(&t.checkpoint(), &samples).unwrap();
    t.train_until(&samples, 5).unwrap();
    r.train_until(&samples, 5).unwrap();
    assert_eq!(r.model.params, t.model.params);
}

#[test]
fn zero_alpha_drops_velocity_exactly() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let model = Stage1Trainer::new(&cfg.stage1, &samples, 0).unwrap().model;
    let frames = samples[0].motion.frames();
    for alpha in [0.0, 0.5] {
        let w = crate::vq::Stage1Weights { alpha, beta: 0.02 };
        let mut g = Graph::new();
        let f = model.bpst.encode(&mut g, &model.params, &model.norm.normalize(frames).unwrap()).unwrap();
        let q = model.book.quantize(g.value(f)).unwrap();
        let quantized = g.constant(q.quantized.clone());
        let z = straight_through(&mut g, f, &q.quantized).unwrap();
        let recon = model.bpst.temporal_decode(&mut g, &model.params, z).unwrap();
        let recon = model.norm.denormalize_graph(&mut g, recon).unwrap();
        let loss = stage1_loss(&mut g, frames, recon, f, quantized, w).unwrap();
        let c = loss.components(&g);
        assert!(c.vel > 0.0);
        let expect = if alpha == 0.0 {
            c.rec + c.emb + 0.02 * c.com
        } else {
            c.rec + alpha * c.vel + c.emb + 0.02 * c.com
        };
        assert_eq!(g.value(loss.total).item(), expect);
    }
}

#[test]
fn stage1_checkpoint_round_trip() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let mut t = Stage1Trainer::new(&cfg.stage1, &samples, cfg.seed).unwrap();
    t.train_until(&samples, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.json");
    t.model.to_checkpoint(None, 2).save(&path).unwrap();
    let back = Stage1Model::load(&path).unwrap();
    let f = samples[1].motion.frames();
    assert_eq!(back.reconstruct(f).unwrap(), t.model.reconstruct(f).unwrap());
    assert!(matches!(Stage1Model::load(&dir.path().join("missing.json")), Err(Error::MissingCheckpoint(_))));
}

#[test]
fn decoded_length_is_codes_times_rate() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let model = Stage1Trainer::new(&cfg.stage1, &samples, 0).unwrap().model;
    for m in 1..5 {
        let codes: Vec<usize> = (0..m).map(|i| i % cfg.stage1.codes).collect();
        let motion = model.codes_to_motion(&codes).unwrap();
        assert_eq!(motion.len(), m * cfg.stage1.downsample_rate);
        assert_eq!(motion.fps(), TOY_FPS);
    }
    assert!(matches!(model.codes_to_motion(&[]), Err(Error::DegenerateGeneration)));
}

#[test]
fn motion_json_csv_json_round_trip() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let model = Stage1Trainer::new(&cfg.stage1, &samples, 0).unwrap().model;
    let motion = model.codes_to_motion(&[1, 2, 3]).unwrap();
    let json = motion_to_json(&motion).unwrap();
    let parsed = motion_from_json(&json, "mem").unwrap();
    let csv = motion_to_csv(&parsed);
    let back = motion_from_csv(&csv, parsed.layout(), parsed.skeleton().clone(), parsed.fps()).unwrap();
    let again = motion_from_json(&motion_to_json(&back).unwrap(), "mem").unwrap();
    for (a, b) in again.frames().data().iter().zip(motion.frames().data()) {
        assert!((a - b).abs() <= 1e-12);
    }

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    export_motion(&motion, &p, ExportFormat::for_path(&p)).unwrap();
    assert!(std::fs::read_to_string(&p).unwrap().starts_with("frame,f0"));
    assert_eq!(ExportFormat::for_path(Path::new("x.json")), ExportFormat::Json);
}

#[test]
fn codes_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("codes.json");
    let f = CodesFile::new(vec![3, 1, 4], Some("raise left arm".into()));
    f.save(&p).unwrap();
    assert_eq!(CodesFile::load(&p).unwrap(), f);
    std::fs::write(&p, r#"{"version":"other","codes":[1]}"#).unwrap();
    assert!(matches!(CodesFile::load(&p), Err(Error::Parse { .. })));
}

fn trained_stage1(cfg: &RunConfig, samples: &[CorpusSample]) -> Stage1Model {
    let mut t = Stage1Trainer::new(&cfg.stage1, samples, cfg.seed).unwrap();
    t.train_until(samples, cfg.stage1.steps).unwrap();
    t.model
}

#[test]
fn untrained_stage2_loss_is_uniform() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let s1 = trained_stage1(&cfg, &samples);
    let t = Stage2Trainer::new(&cfg.stage2, &s1, &samples, cfg.seed).unwrap();
    let uniform = ((cfg.stage1.codes + 1) as f64).ln();
    for ex in &t.examples {
        assert!((t.model.loss(&ex.ids, &ex.codes).unwrap() - uniform).abs() < 1e-12);
    }
    let report = evaluate(&s1, &t.model, &samples, 0).unwrap();
    assert!((report.stage2_loss - uniform).abs() < 1e-12);
}

#[test]
fn stage2_leaves_stage1_untouched() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let s1 = trained_stage1(&cfg, &samples);
    let before = s1.to_checkpoint(None, 0);
    let mut t = Stage2Trainer::new(&cfg.stage2, &s1, &samples, cfg.seed).unwrap();
    t.train_until(cfg.stage2.steps).unwrap();
    let after = s1.to_checkpoint(None, 0);
    assert_eq!(before.tensors, after.tensors);
    assert!(t.model.params.names().all(|n| n.starts_with("gla.") || n.starts_with("text.")));
}

#[test]
fn long_code_sequences_are_skipped() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let s1 = trained_stage1(&cfg, &samples);
    let (train, _) = split_indices(samples.len());
    let vocab = crate::text::Vocabulary::build(samples.iter().map(|s| s.text.sentence.as_str()));
    let all = encode_examples(&s1, &samples, &train, &vocab, 8).unwrap();
    let limit = 3;
    let kept = encode_examples(&s1, &samples, &train, &vocab, limit).unwrap();
    let expected: Vec<_> = all.iter().filter(|e| e.codes.len() <= limit).cloned().collect();
    assert_eq!(kept, expected);
    assert!(kept.len() < all.len());
}

#[test]
fn stage2_checkpoint_reproduces_generation() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let s1 = trained_stage1(&cfg, &samples);
    let mut t = Stage2Trainer::new(&cfg.stage2, &s1, &samples, cfg.seed).unwrap();
    t.train_until(cfg.stage2.steps).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s2.json");
    t.checkpoint().save(&path).unwrap();
    let back = Stage2Model::load(&path).unwrap();
    let sentence = &samples[0].text.sentence;
    for i in 0..3 {
        assert_eq!(
            back.generate(sentence, 9, i).unwrap(),
            t.model.generate(sentence, 9, i).unwrap()
        );
    }
    assert!(matches!(Stage1Model::load(&path), Err(Error::Format(_))));
}

#[test]
fn ablations_change_only_their_namespace() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let s1 = trained_stage1(&cfg, &samples);
    let names = |c: &RunConfig| -> Vec<String> {
        let t = Stage2Trainer::new(&c.stage2, &s1, &samples, c.seed).unwrap();
        t.model.params.names().map(String::from).collect()
    };
    let full = names(&cfg);
    for (a, ns) in [(Ablation::Local, "gla.local."), (Ablation::Global, "gla.global.")] {
        let ablated = names(&cfg.clone().with_ablation(a));
        let expect: Vec<_> = full.iter().filter(|n| !n.starts_with(ns)).cloned().collect();
        assert_eq!(ablated, expect, "{a:?}");
        let mut t = Stage2Trainer::new(&cfg.clone().with_ablation(a).stage2, &s1, &samples, 0).unwrap();
        t.train_until(2).unwrap();
    }
    let s1_names = |c: &RunConfig| -> Vec<String> {
        let m = Stage1Trainer::new(&c.stage1, &samples, 0).unwrap().model;
        m.params.names().map(String::from).collect()
    };
    let full1 = s1_names(&cfg);
    let abl1 = s1_names(&cfg.clone().with_ablation(Ablation::Bpst));
    let f: Vec<_> = full1.iter().filter(|n| !n.starts_with("bpst.spatial.")).collect();
    let a: Vec<_> = abl1.iter().filter(|n| !n.starts_with("bpst.spatial.")).collect();
    assert_eq!(f, a);
    assert_ne!(full1, abl1);
}

#[test]
fn eval_is_reproducible() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let s1 = trained_stage1(&cfg, &samples);
    let mut t = Stage2Trainer::new(&cfg.stage2, &s1, &samples, cfg.seed).unwrap();
    t.train_until(cfg.stage2.steps).unwrap();
    let a = evaluate(&s1, &t.model, &samples, 3).unwrap();
    let b = evaluate(&s1, &t.model, &samples, 3).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!((0.0..=1.0).contains(&a.codebook_usage_fraction));
    assert!(a.generations >= EVAL_GENERATIONS);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("eval.json");
    a.save(&p).unwrap();
    assert_eq!(EvalReport::load(&p).unwrap(), a);
}

#[test]
fn eval_needs_a_held_out_split() {
    let cfg = tiny();
    let samples = corpus(&cfg);
    let s1 = trained_stage1(&cfg, &samples);
    let t = Stage2Trainer::new(&cfg.stage2, &s1, &samples, cfg.seed).unwrap();
    let n = (0..).take_while(|&i| !is_held_out(i)).count();
    let train_only = &samples[..n.min(samples.len())];
    assert!(split_indices(train_only.len()).1.is_empty());
    assert!(matches!(evaluate(&s1, &t.model, train_only, 0), Err(Error::Config { .. })));
}

#[test]
fn codes_with_end_token_strip_back() {
    let seq = CodeSequence::new(vec![1, 2], 8).unwrap();
    assert_eq!(CodeSequence::from_tokens(&seq.with_end(8), 8).unwrap(), seq);
}
