mod common;

use proptest::prelude::*;
use r2m::datakit::{self, Grammar, SynthConfig};
use r2m::encoder::ConceptSet;
use r2m::harness::{
    bleu_n, concept_recall, evaluate, eval_order_seed, run_stage, CorpusData, Model, Stage, StageData, TrainConfig,
    TrainData,
};
use r2m::losses::rec_loss;
use r2m::numcore::Graph;
use r2m::seq2seq::{decode_greedy, decode_teacher_forced, reconstruct};
use r2m::Error;

fn data(seed: u64) -> TrainData {
    let ds = datakit::generate(
        &Grammar::desk_default(),
        &SynthConfig {
            n_corpus: 120,
            n_images: 48,
            seed,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    TrainData::from_dataset(&ds)
}

fn config(seed: u64, out: &std::path::Path) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: [2, 2, 1, 1],
        epoch_checkpoints: false,
        out_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

fn mean_rec(model: &Model, data: &CorpusData) -> f64 {
    let mut total = 0.0;
    for (i, (cs, t)) in data.concepts.iter().zip(&data.targets).enumerate() {
        let mut g = Graph::new(&model.store);
        let v = model.net.encode(&mut g, cs, eval_order_seed(i)).unwrap();
        let dec = decode_teacher_forced(&mut g, &model.net, v, t).unwrap();
        let r = reconstruct(&mut g, &model.net, &dec.memories).unwrap();
        let l = rec_loss(&mut g, v, r).unwrap();
        total += g.scalar(l);
    }
    total / data.len() as f64
}

#[test]
fn stages_must_run_in_order_and_on_their_own_data() {
    let d = data(1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(1, dir.path());
    let mut model = Model::new(&cfg, d.vocab.clone(), d.dictionary.clone()).unwrap();
    let err = run_stage(Stage::Supervised, &cfg, &mut model, d.stage_data(Stage::Supervised), false);
    assert!(matches!(err, Err(Error::Contract(_))));
    let err = run_stage(Stage::Xe, &cfg, &mut model, StageData::Images(&d.images), false);
    assert!(matches!(err, Err(Error::Contract(_))));
    let loose = TrainConfig {
        allow_out_of_order: true,
        ..cfg.clone()
    };
    let err = run_stage(Stage::Matching, &loose, &mut model, StageData::Corpus(&d.corpus), false);
    assert!(matches!(err, Err(Error::Contract(_))));
    assert!(run_stage(Stage::Matching, &loose, &mut model, d.stage_data(Stage::Matching), false).is_ok());
}

#[test]
fn stage_two_lowers_reconstruction_loss_and_curves_stay_finite() {
    let d = data(2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        beta: 1.0,
        ..config(2, dir.path())
    };
    let mut model = Model::new(&cfg, d.vocab.clone(), d.dictionary.clone()).unwrap();
    let s1 = run_stage(Stage::Xe, &cfg, &mut model, d.stage_data(Stage::Xe), false).unwrap();
    let before = mean_rec(&model, &d.corpus);
    let s2 = run_stage(Stage::Supervised, &cfg, &mut model, d.stage_data(Stage::Supervised), false).unwrap();
    let after = mean_rec(&model, &d.corpus);
    assert!(after < before, "rec {before} -> {after}");
    let s3 = run_stage(Stage::Matching, &cfg, &mut model, d.stage_data(Stage::Matching), false).unwrap();
    let s4 = run_stage(Stage::Unsupervised, &cfg, &mut model, d.stage_data(Stage::Unsupervised), false).unwrap();
    for o in [&s1, &s2, &s3, &s4] {
        assert!(!o.losses.is_empty());
        assert!(o.losses.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_next_stage() {
    let d = data(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(3, dir.path());
    let mut model = Model::new(&cfg, d.vocab.clone(), d.dictionary.clone()).unwrap();
    let s1 = run_stage(Stage::Xe, &cfg, &mut model, d.stage_data(Stage::Xe), true).unwrap();
    let ckpt = s1.checkpoints.last().unwrap().clone();
    let first = run_stage(Stage::Supervised, &cfg, &mut model, d.stage_data(Stage::Supervised), false).unwrap();
    let (mut resumed, loaded_cfg) = Model::load(&ckpt).unwrap();
    assert_eq!(resumed.stage, 1);
    assert_eq!(loaded_cfg.to_text(), cfg.to_text());
    let again = run_stage(Stage::Supervised, &cfg, &mut resumed, d.stage_data(Stage::Supervised), false).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first.losses), bits(&again.losses));
}

#[test]
fn width_one_evaluation_is_greedy_and_repeatable() {
    let d = data(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(4, dir.path());
    let mut model = Model::new(&cfg, d.vocab.clone(), d.dictionary.clone()).unwrap();
    run_stage(Stage::Xe, &cfg, &mut model, d.stage_data(Stage::Xe), false).unwrap();
    let report = evaluate(&model, &d.val_images, 1, cfg.max_len).unwrap();
    let greedy: Vec<String> = d
        .val_images
        .concepts
        .iter()
        .enumerate()
        .map(|(i, cs)| {
            let mut g = Graph::new(&model.store);
            let v = model.net.encode(&mut g, cs, eval_order_seed(i)).unwrap();
            model.vocab.decode(&decode_greedy(&mut g, &model.net, v, cfg.max_len).unwrap().0)
        })
        .collect();
    assert_eq!(report.captions, greedy);
    let beam = evaluate(&model, &d.val_images, 3, cfg.max_len).unwrap();
    assert_eq!(beam, evaluate(&model, &d.val_images, 3, cfg.max_len).unwrap());
    for r in [&report, &beam] {
        assert!(r.bleu.iter().chain([&r.concept_recall]).all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn config_text_round_trip_and_errors() {
    let cfg = TrainConfig {
        cosine: true,
        lr: [1e-2, 2e-3, 5e-4, 1e-4],
        image_trainable: vec!["enc.".into(), "rec.".into()],
        ..TrainConfig::default()
    };
    let back = TrainConfig::parse(&cfg.to_text(), "mem").unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    match TrainConfig::parse("d = 32\n\nwidth = 4\n", "mem") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    assert!(TrainConfig::parse("heads = 3\n", "mem").is_err());
}

#[test]
fn bleu_hand_examples() {
    let w = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let b1 = bleu_n(&[w("a a a")], &[vec![w("a b")]], 1).unwrap();
    assert!((b1 - 1.0 / 3.0).abs() < 1e-12);
    let same = w("the cat sat on the mat");
    for n in 1..=4 {
        assert_eq!(bleu_n(std::slice::from_ref(&same), &[vec![same.clone()]], n).unwrap(), 1.0);
    }
    assert!(bleu_n::<String>(&[], &[], 4).is_err());
}

#[test]
fn recall_examples() {
    let cs = ConceptSet::certain([3, 4, 5, 6]).unwrap();
    assert_eq!(concept_recall(&[vec![3, 9, 5]], std::slice::from_ref(&cs)).unwrap(), 0.5);
    assert_eq!(concept_recall(&[vec![6, 5, 4, 3]], std::slice::from_ref(&cs)).unwrap(), 1.0);
    assert_eq!(concept_recall(&[vec![]], &[ConceptSet::default()]).unwrap(), 1.0);
    assert!(concept_recall(&[vec![]], &[]).is_err());
}

proptest! {
    #[test]
    fn bleu_matches_naive_counting(seed in any::<u64>(), n in 1usize..=4, items in 1usize..6) {
        let words = ["a", "b", "c", "d"];
        let mut r = common::rng(seed);
        let cands: Vec<Vec<String>> = (0..items).map(|_| common::random_sentence(&mut r, &words, 8)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..items)
            .map(|_| (0..1 + seed as usize % 3).map(|_| common::random_sentence(&mut r, &words, 8)).collect())
            .collect();
        let fast = bleu_n(&cands, &refs, n).unwrap();
        let slow = common::naive_bleu(&cands, &refs, n);
        prop_assert!((fast - slow).abs() < 1e-9, "{} vs {}", fast, slow);
        prop_assert!((0.0..=1.0).contains(&fast));
    }
}
