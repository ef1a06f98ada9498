use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use reconprune::datagen::{
    generate_dataset, generate_scene, read_dataset, write_dataset, BackgroundKind, ImageMaskPair, SceneConfig, TEST_INDEX_BASE,
};
use reconprune::encoder::{Encoder, EncoderConfig};
use reconprune::eval::evaluate;
use reconprune::flops::{bench, wall_clock, ModelSpec};
use reconprune::layers::LayerConfig;
use reconprune::losses::LossConfig;
use reconprune::prune_infer::{downstream_stub, prune, retained_count, top_k_indices, PruneDump, Retain};
use reconprune::pruner::{PrunerConfig, PrunerParams};
use reconprune::training::{train_with, Checkpoint, TrainConfig, Trainer};
use reconprune::viz::{saliency_map, write_panel, Rgb};
use reconprune::{Error, VERSION};

use crate::args::{BenchArgs, DatagenArgs, EvalArgs, PruneArgs, TrainArgs, VizArgs};
use crate::error::CliError;

/// Provenance block embedded in every JSON output.
#[derive(Debug, Serialize)]
struct Meta<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a C,
    config_hash: String,
}

fn meta<'a, C: Serialize>(command: &'a str, seed: u64, config: &'a C) -> Result<Meta<'a, C>, CliError> {
    let canonical = serde_json::to_string(config)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(Meta {
        tool: "reconprune",
        version: VERSION,
        command,
        seed,
        config,
        config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// `{"meta": ..., <body fields>}` as pretty JSON.
fn with_meta<C: Serialize, B: Serialize>(meta: &Meta<'_, C>, body: &B) -> Result<String, CliError> {
    let mut out = serde_json::Map::new();
    out.insert("meta".into(), serde_json::to_value(meta)?);
    match serde_json::to_value(body)? {
        Value::Object(fields) => out.extend(fields),
        other => {
            out.insert("result".into(), other);
        }
    }
    Ok(serde_json::to_string_pretty(&Value::Object(out))? + "\n")
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn existing(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("{what} path {} does not exist", path.display())));
    }
    Ok(())
}

/// A dataset file, or `dir/<default_name>` when given a directory.
fn load_data(path: &Path, default_name: &str) -> Result<Vec<ImageMaskPair>, CliError> {
    existing(path, "data")?;
    let file = if path.is_dir() { path.join(default_name) } else { path.to_path_buf() };
    existing(&file, "data")?;
    Ok(read_dataset(&file)?)
}

fn load_checkpoint(path: &Path) -> Result<Trainer<f32>, CliError> {
    existing(path, "checkpoint")?;
    Ok(Trainer::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn parse_background(s: &str) -> Result<BackgroundKind, CliError> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown background {s:?} (gradient, noise_texture, flat, mixed)")))
}

pub fn datagen(args: &DatagenArgs) -> Result<(), CliError> {
    let cfg = SceneConfig {
        size: args.size,
        background: parse_background(&args.background)?,
        seed: args.seed,
        ..Default::default()
    };
    cfg.validate()?;
    fs::create_dir_all(&args.out)?;
    let train = generate_dataset(&cfg, 0, args.count)?;
    write_dataset(&train, args.out.join("train.nfgs"))?;
    let test = generate_dataset(&cfg, TEST_INDEX_BASE, args.test_count)?;
    write_dataset(&test, args.out.join("test.nfgs"))?;
    #[derive(Serialize)]
    struct Body {
        scene: SceneConfig,
        train_file: &'static str,
        test_file: &'static str,
        test_index_base: u64,
    }
    let body = Body {
        scene: cfg,
        train_file: "train.nfgs",
        test_file: "test.nfgs",
        test_index_base: TEST_INDEX_BASE,
    };
    let text = with_meta(&meta("datagen", args.seed, args)?, &body)?;
    fs::write(args.out.join("datagen.json"), text)?;
    eprintln!("wrote {} train and {} test pairs to {}", args.count, args.test_count, args.out.display());
    Ok(())
}

pub fn train_config(args: &TrainArgs, image_size: usize) -> Result<TrainConfig, CliError> {
    let layer = LayerConfig {
        hidden: args.hidden,
        heads: args.heads,
        intermediate: args.intermediate,
    };
    let cfg = TrainConfig {
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        weight_decay: args.weight_decay,
        seed: args.seed,
        mode: args.mode.parse()?,
        loss: LossConfig {
            alpha: args.alpha,
            lambda: args.lambda,
            ..Default::default()
        },
        encoder: EncoderConfig {
            image_size,
            patch_size: args.patch_size,
            hidden: args.hidden,
            seed: args.seed,
        },
        pruner: PrunerConfig { layer },
        decoder_layer: layer,
        theta_fg: args.theta_fg,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let data = load_data(&args.data, "train.nfgs")?;
    let size = data.first().map(|p| p.size).ok_or_else(|| CliError::Usage("training dataset is empty".into()))?;
    let cfg = train_config(args, size)?;
    fs::create_dir_all(&args.out)?;
    let outcome = train_with::<f32>(cfg.clone(), &data, |e| {
        eprintln!(
            "epoch {:>3}  l_all {:.5}  l_fore {:.5}  l_back {:.5}  frac_pos {:.4}",
            e.epoch, e.l_all, e.l_fore, e.l_back, e.frac_pos
        );
    })?;
    outcome.trainer.to_checkpoint()?.save(args.out.join("checkpoint.rpck"))?;
    fs::write(args.out.join("train_log.jsonl"), outcome.log_jsonl()?)?;
    #[derive(Serialize)]
    struct Body<'a> {
        train_config: &'a TrainConfig,
        steps: usize,
        epochs: &'a [reconprune::training::EpochSummary],
    }
    let body = Body {
        train_config: &cfg,
        steps: outcome.trainer.step,
        epochs: &outcome.epochs,
    };
    fs::write(args.out.join("train.json"), with_meta(&meta("train", args.seed, args)?, &body)?)?;
    eprintln!("wrote checkpoint, log and summary to {}", args.out.display());
    Ok(())
}

pub fn prune_cmd(args: &PruneArgs) -> Result<(), CliError> {
    let (encoder, pruner) = match &args.checkpoint {
        Some(path) => {
            let t = load_checkpoint(path)?;
            (t.encoder, t.pruner)
        }
        None => {
            let enc_cfg = EncoderConfig {
                image_size: args.image_size,
                patch_size: args.patch_size,
                hidden: args.hidden,
                seed: args.seed,
            };
            let layer = LayerConfig {
                hidden: args.hidden,
                heads: 4,
                intermediate: 4 * args.hidden,
            };
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.seed);
            (Encoder::<f32>::new(enc_cfg)?, PrunerParams::<f32>::new(PrunerConfig { layer }, &mut rng)?)
        }
    };
    let image = match &args.data {
        Some(path) => {
            let data = load_data(path, "test.nfgs")?;
            data.into_iter()
                .nth(args.index)
                .ok_or_else(|| CliError::Usage(format!("index {} outside the dataset", args.index)))?
        }
        None => {
            let scene = SceneConfig {
                size: encoder.cfg.image_size,
                seed: args.seed,
                ..Default::default()
            };
            generate_scene(&scene, args.index as u64)?
        }
    };
    let seq = encoder.encode(&image.image)?;
    let scores = pruner.score_sequence(&seq)?;
    let retain = match (args.ratio, args.keep) {
        (_, Some(k)) => Retain::Count(k),
        (Some(p), None) => Retain::Ratio(p),
        (None, None) => Retain::Ratio(0.5),
    };
    let pruned = prune(&seq, &scores, retain)?;
    let layout = downstream_stub(&pruned, args.text_len);
    #[derive(Serialize)]
    struct Body {
        #[serde(flatten)]
        dump: PruneDump,
        layout_visual: usize,
        layout_text: usize,
        layout_total: usize,
    }
    let body = Body {
        dump: PruneDump::new(&pruned, &scores),
        layout_visual: layout.visual,
        layout_text: layout.text,
        layout_total: layout.total(),
    };
    emit(&with_meta(&meta("prune", args.seed, args)?, &body)?, args.out.as_deref())?;
    eprintln!("kept {} of {} tokens", pruned.len(), pruned.original_len);
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    existing(&args.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = load_data(&args.data, "test.nfgs")?;
    let out = evaluate(&ckpt, &data, &args.ratios)?;
    let seed = ckpt.config()?.seed;
    emit(&with_meta(&meta("eval", seed, args)?, &out.report)?, args.out.as_deref())?;
    if let Some(csv) = &args.csv {
        emit(&out.to_csv(), Some(csv))?;
    }
    Ok(())
}

pub fn bench_cmd(args: &BenchArgs) -> Result<(), CliError> {
    let spec = ModelSpec {
        n_layers: args.layers,
        hidden: args.hidden,
        intermediate: args.intermediate,
        heads: args.heads,
        vocab: args.vocab,
        visual: args.visual,
        text: args.text,
    };
    let pruner = LayerConfig {
        hidden: args.pruner_hidden,
        heads: args.pruner_heads,
        intermediate: args.pruner_intermediate,
    };
    pruner.validate()?;
    let m = match args.keep {
        Some(k) => k.min(args.visual),
        None => retained_count(args.visual, args.ratio)?,
    };
    let report = bench(&spec, args.visual, m, &pruner)?;
    #[derive(Serialize)]
    struct Body {
        #[serde(flatten)]
        report: reconprune::flops::BenchReport,
        #[serde(skip_serializing_if = "Option::is_none")]
        wall_clock: Option<reconprune::flops::WallClock>,
    }
    let wall = args.wall_clock.map(|reps| wall_clock(&spec, m, &pruner, reps)).transpose()?;
    let body = Body { report, wall_clock: wall };
    emit(&with_meta(&meta("bench", 0, args)?, &body)?, args.out.as_deref())
}

pub fn viz(args: &VizArgs) -> Result<(), CliError> {
    let trainer = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.data, "test.nfgs")?;
    fs::create_dir_all(&args.out)?;
    let enc = trainer.cfg.encoder;
    let (size, n) = (enc.image_size, enc.num_tokens());
    if data.first().is_some_and(|p| p.size != size) {
        return Err(CliError::Core(Error::BadImageSize(format!(
            "dataset images are {}px, checkpoint expects {size}px",
            data[0].size
        ))));
    }
    let m = retained_count(n, args.ratio)?;
    let mut written: Vec<PathBuf> = Vec::new();
    for &i in &args.indices {
        let pair = data
            .get(i)
            .ok_or_else(|| CliError::Usage(format!("index {i} outside the dataset of {}", data.len())))?;
        let (scores, recon) = trainer.reconstruct(&[&pair.image])?;
        let kept = top_k_indices(&scores, m);
        let input = Rgb::new(size, size, pair.image.clone())?;
        let sal = saliency_map(&scores, enc.grid(), enc.patch_size, Some(&kept))?;
        let recon = recon
            .map(|(f, b)| Ok::<_, Error>((Rgb::new(size, size, f)?, Rgb::new(size, size, b)?)))
            .transpose()?;
        let paths = write_panel(&args.out, &format!("sample{i:05}"), &input, &sal, recon.as_ref().map(|(f, b)| (f, b)))?;
        written.extend(paths);
    }
    eprintln!("wrote {} images to {}", written.len(), args.out.display());
    Ok(())
}
