use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use r2m::datakit::{self, io, Grammar, SynthConfig};
use r2m::encoder::{filter_concepts, Vocabulary};
use r2m::harness::{
    caption_all, evaluate, full_model_check, run_stage, ImageData, Model, Stage, TrainConfig, TrainData,
    GRADCHECK_TOL,
};
use r2m::numcore::Graph;
use r2m::seq2seq::decode_teacher_forced;
use r2m::{Error, Result};

#[derive(Parser)]
#[command(name = "r2m", version, about = "Unpaired concept-to-caption training with relational memory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus, image set, dictionary and splits.
    SynthData {
        /// Grammar file; the bundled desk grammar when omitted.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_corpus: usize,
        #[arg(long, default_value_t = 500)]
        n_images: usize,
        #[arg(long, default_value_t = 64)]
        d_img: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Run one stage or the whole curriculum.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// 1, 2, 3, 4 or all.
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        allow_out_of_order: bool,
    },
    /// Caption every image in a feature file.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Detections file; defaults to detections.txt beside the features.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a split of the image set.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// An index file such as image_val.idx inside a synth-data directory.
        #[arg(long)]
        split: PathBuf,
        /// Overrides the beam width stored with the checkpoint.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Finite-difference check of every parameter group on a random model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
    },
    /// Teacher-force a sentence and dump the fusion and recurrent memory attention.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sentence: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn train(config: &Path, stage: &str, resume: Option<&Path>, allow: bool) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.allow_out_of_order |= allow;
    let data = TrainData::load(&cfg.data_dir)?;
    let mut model = match resume {
        Some(p) => Model::load(p)?.0,
        None => Model::new(&cfg, data.vocab.clone(), data.dictionary.clone())?,
    };
    if model.vocab != data.vocab {
        return Err(Error::Vocabulary("checkpoint vocabulary differs from the data directory".into()));
    }
    let stages: Vec<Stage> = match stage {
        "all" => Stage::ALL.into_iter().filter(|s| s.number() > model.stage).collect(),
        n => vec![Stage::from_number(
            n.parse().map_err(|_| Error::Contract(format!("bad stage `{n}`")))?,
        )?],
    };
    for s in stages {
        let outcome = run_stage(s, &cfg, &mut model, data.stage_data(s), true)?;
        for (e, l) in outcome.epoch_means.iter().enumerate() {
            println!("stage={} epoch={} loss={l}", s.number(), e + 1);
        }
        if let Some(p) = outcome.checkpoints.last() {
            println!("checkpoint={}", p.display());
        }
    }
    Ok(())
}

fn generate(ckpt: &Path, features: &Path, detections: Option<&Path>, beam: usize, out: Option<&Path>) -> Result<()> {
    let (model, cfg) = Model::load(ckpt)?;
    let feats = io::load_features(features)?;
    let det_path = detections.map_or_else(|| sibling(features, io::DETECTIONS), Path::to_path_buf);
    let dets = io::load_detections(&det_path, &model.vocab)?;
    if dets.len() != feats.len() {
        return Err(Error::Contract(format!(
            "{} feature rows but {} detection lines",
            feats.len(),
            dets.len()
        )));
    }
    let dict = model.dictionary_ids();
    let concepts: Vec<_> = dets
        .iter()
        .map(|d| filter_concepts(d, &dict, datakit::DETECTION_THRESHOLD))
        .collect();
    let caps = caption_all(&model, &concepts, beam, cfg.max_len)?;
    let mut text = String::new();
    for c in caps {
        writeln!(text, "{}", model.vocab.decode(&c)).expect("string write");
    }
    emit(out, &text)
}

fn evaluate_cmd(ckpt: &Path, split: &Path, beam: Option<usize>) -> Result<()> {
    let (model, cfg) = Model::load(ckpt)?;
    let dir = split.parent().unwrap_or(Path::new("."));
    let idx = io::load_split(split)?;
    let samples = io::load_images(dir, &model.vocab)?;
    if let Some(bad) = idx.iter().find(|&&i| i >= samples.len()) {
        return Err(Error::Contract(format!("split index {bad} out of range")));
    }
    let data = ImageData::new(&samples, &model.dictionary_ids()).subset(&idx);
    let report = evaluate(&model, &data, beam.unwrap_or(cfg.beam_width), cfg.max_len)?;
    print!("{}", report.to_text());
    Ok(())
}

fn gradcheck(config: Option<&Path>, seed: u64, vocab: usize) -> Result<bool> {
    let cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => {
            let mut c = TrainConfig::default();
            (c.d, c.d_k, c.d_v, c.d_key, c.d_val, c.d_img) = (8, 4, 4, 4, 4, 8);
            c
        }
    };
    let reports = full_model_check(&cfg.dims(vocab), seed)?;
    let mut ok = true;
    for (group, r) in &reports {
        let pass = r.passes(GRADCHECK_TOL);
        ok &= pass;
        println!(
            "{} group={group} params={} max_rel_error={:.3e} deterministic={}",
            if pass { "PASS" } else { "FAIL" },
            r.params.len(),
            r.max_rel_error(),
            r.deterministic
        );
    }
    Ok(ok)
}

fn export_attention(ckpt: &Path, sentence: &str, out: Option<&Path>) -> Result<()> {
    let (model, _) = Model::load(ckpt)?;
    let words = datakit::tokenize(sentence);
    if words.is_empty() {
        return Err(Error::Contract("empty sentence".into()));
    }
    let mut targets = model.vocab.encode(&words);
    let concepts = datakit::extract_concepts(&targets, &model.dictionary_ids());
    targets.push(Vocabulary::END_ID);
    let mut g = Graph::new(&model.store);
    let v = model.net.encode(&mut g, &concepts, r2m::harness::eval_order_seed(0))?;
    let trace = decode_teacher_forced(&mut g, &model.net, v, &targets)?.trace;
    let mut csv = String::from("module,step,token,head,query,key,weight\n");
    let tok = |t: usize| model.vocab.token(t).unwrap_or("<UNK>").to_string();
    for step in 0..trace.steps() {
        let consumed = if step == 0 { Vocabulary::START_ID } else { trace.tokens[step - 1] };
        for (h, a) in trace.fm[step].heads.iter().enumerate() {
            for (k, w) in a.iter().enumerate() {
                let name = |i| if i == 0 { "v" } else { "w" };
                writeln!(csv, "fm,{step},{},{h},{},{},{w}", tok(consumed), name(k / 2), name(k % 2))
                    .expect("string write");
            }
        }
        let rows = model.net.dims.mem_rows;
        for (h, a) in trace.rm[step].heads.iter().enumerate() {
            for (k, w) in a.iter().enumerate() {
                let (q, key) = (k / (rows + 1), k % (rows + 1));
                let key = if key == rows { "f".to_string() } else { format!("m{key}") };
                writeln!(csv, "rm,{step},{},{h},m{q},{key},{w}", tok(consumed)).expect("string write");
            }
        }
    }
    emit(out, &csv)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::SynthData {
            grammar,
            out,
            seed,
            n_corpus,
            n_images,
            d_img,
            noise,
        } => {
            let g = match grammar {
                Some(p) => Grammar::load(&p)?,
                None => Grammar::desk_default(),
            };
            let cfg = SynthConfig {
                n_corpus,
                n_images,
                d_img,
                noise_sigma: noise,
                seed,
                ..SynthConfig::default()
            };
            let ds = datakit::generate(&g, &cfg)?;
            io::save_dataset(&out, &ds)?;
            println!(
                "wrote {} sentences, {} images, vocabulary {} to {}",
                ds.corpus.len(),
                ds.images.len(),
                ds.vocab.len(),
                out.display()
            );
            Ok(true)
        }
        Cmd::Train {
            config,
            stage,
            resume,
            allow_out_of_order,
        } => train(&config, &stage, resume.as_deref(), allow_out_of_order).map(|_| true),
        Cmd::Generate {
            ckpt,
            features,
            detections,
            beam,
            out,
        } => generate(&ckpt, &features, detections.as_deref(), beam, out.as_deref()).map(|_| true),
        Cmd::Evaluate { ckpt, split, beam } => evaluate_cmd(&ckpt, &split, beam).map(|_| true),
        Cmd::Gradcheck { config, seed, vocab } => gradcheck(config.as_deref(), seed, vocab),
        Cmd::ExportAttention { ckpt, sentence, out } => {
            export_attention(&ckpt, &sentence, out.as_deref()).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
