use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{info, warn};
use parattack::artifacts::{check_noise_fits, load_model, load_noise, noise_hash, save_model, save_noise};
use parattack::attack::{train_universal, AttackEpoch, NoiseMode};
use parattack::data::{generate_synthetic, load_manifest, manifest_path, write_ppm, write_synthetic, Dataset};
use parattack::defense::{load_defense, save_defense, train_defense};
use parattack::eval::evaluate;
use parattack::model::ParModel;
use parattack::train::{curve_csv, train_victim};
use parattack::Error;

use crate::config::{write_snapshot, RunConfig, SNAPSHOT_FILE};
use crate::{AttackArgs, DefendArgs, EvalArgs, ExportArgs, GenDataArgs, Mode, TrainArgs, UsageError};

/// A manifest file, or the `<split>.json` manifest inside a dataset directory.
fn load_split(data: &Path, split: &str) -> anyhow::Result<Dataset> {
    let path = if data.is_dir() {
        manifest_path(data, split)
    } else {
        data.to_path_buf()
    };
    Ok(load_manifest(&path)?)
}

fn check_images_fit(model: &ParModel, data: &Dataset) -> anyhow::Result<()> {
    if data.schema.len() != model.config.attribute_count {
        return Err(Error::Mismatch(format!(
            "dataset has {} attributes, model expects {}",
            data.schema.len(),
            model.config.attribute_count
        ))
        .into());
    }
    if let Some(s) = data.samples.first() {
        if s.image.shape() != model.config.image_shape() {
            return Err(Error::Mismatch(format!(
                "dataset images are {:?}, model expects {:?}",
                s.image.shape(),
                model.config.image_shape()
            ))
            .into());
        }
    }
    Ok(())
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn resolved(config: Option<&Path>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    Ok(cfg.resolve())
}

pub fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let cfg = resolved(Some(&args.config), args.seed)?;
    cfg.validate()?;
    let data = generate_synthetic(&cfg.synthetic)?;
    let (train, test) = write_synthetic(&args.out, &data)?;
    write_snapshot(&args.out.join(SNAPSHOT_FILE), "gen-data", cfg.synthetic.seed, &cfg)?;
    info!("wrote {} train and {} test samples", data.train.len(), data.test.len());
    println!("{}", train.display());
    println!("{}", test.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = resolved(args.config.as_deref(), args.seed)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let dir = cfg.data_dir(args.data.as_deref())?;
    let data = load_split(&dir, "train")?;
    if data.schema.len() != cfg.model.attribute_count {
        return Err(UsageError(format!(
            "model.attribute_count is {} but the dataset schema has {} attributes",
            cfg.model.attribute_count,
            data.schema.len()
        ))
        .into());
    }
    let mut model = ParModel::init(cfg.model.clone(), data.schema.clone(), cfg.train.seed)?;
    check_images_fit(&model, &data)?;
    let curve = train_victim(&mut model, &data, &cfg.train)?;

    create_out(&args.out)?;
    save_model(&args.out, &model)?;
    write_text(&args.out.join("training_curve.csv"), &curve_csv(&curve))?;
    write_snapshot(&args.out.join(SNAPSHOT_FILE), "train", cfg.train.seed, &cfg)?;
    if dir.is_dir() && manifest_path(&dir, "test").exists() {
        let test = load_split(&dir, "test")?;
        let r = evaluate(&model, &test, None, None, cfg.eval.threshold)?;
        info!("test split: mA {:.4} accuracy {:.4} F1 {:.4}", r.m_a, r.accuracy, r.f1);
    }
    println!("{}", args.out.display());
    Ok(())
}

fn attack_curve_csv(trace: &[AttackEpoch]) -> String {
    let mut s = String::from("epoch,lr,loss,max_abs\n");
    for r in trace {
        let _ = writeln!(s, "{},{:.8},{:.8},{:.8}", r.epoch, r.lr, r.loss, r.max_abs);
    }
    s
}

pub const NOISE_FILE: &str = "noise.dtsr";

pub fn attack(args: &AttackArgs) -> anyhow::Result<()> {
    let mut cfg = resolved(args.config.as_deref(), args.seed)?;
    let a = &mut cfg.attack;
    if let Some(m) = args.mode {
        a.mode = match m {
            Mode::Global => NoiseMode::Global,
            Mode::Patch => NoiseMode::Patch,
        };
    }
    if let Some(e) = args.epsilon {
        a.epsilon = e;
    }
    if let Some(x) = args.alpha {
        a.alpha = x;
    }
    if let Some(e) = args.epochs {
        a.epochs = e;
    }
    if let Some(p) = args.patch_size {
        a.patch_size = p;
    }
    a.use_semantic &= !args.no_semantic;
    a.use_label_perturbation &= !args.no_label_perturb;
    a.use_linf_constraint &= !args.no_linf;
    cfg.validate()?;

    let model = load_model(&args.model)?;
    let data = load_split(&cfg.data_dir(args.data.as_deref())?, "train")?;
    check_images_fit(&model, &data)?;
    let (eta, provenance) = train_universal(&model, &data, &cfg.attack)?;

    create_out(&args.out)?;
    let noise_path = args.out.join(NOISE_FILE);
    save_noise(&noise_path, &eta, Some(&provenance))?;
    write_text(&args.out.join("attack_curve.csv"), &attack_curve_csv(&provenance.trace))?;
    write_snapshot(&args.out.join(SNAPSHOT_FILE), "attack", cfg.attack.seed, &cfg)?;
    info!(
        "noise max |eta| {:.6} (epsilon {:.6})",
        eta.noise.max_abs(),
        eta.epsilon
    );
    println!("{}", noise_path.display());
    Ok(())
}

pub fn defend(args: &DefendArgs) -> anyhow::Result<()> {
    let mut cfg = resolved(args.config.as_deref(), args.seed)?;
    if let Some(e) = args.epochs {
        cfg.defense.epochs = e;
    }
    if args.filter_only {
        cfg.defense.train_prompt = false;
    }
    cfg.validate()?;

    let model = load_model(&args.model)?;
    let (eta, _) = load_noise(&args.noise)?;
    check_noise_fits(&eta, &model.config)?;
    let data = load_split(&cfg.data_dir(args.data.as_deref())?, "train")?;
    check_images_fit(&model, &data)?;
    let defense = train_defense(&model, &eta, &data, &cfg.defense)?;

    save_defense(&args.out, &defense)?;
    write_text(&args.out.join("defense_curve.csv"), &curve_csv(&defense.trace))?;
    write_snapshot(&args.out.join(SNAPSHOT_FILE), "defend", cfg.defense.seed, &cfg)?;
    println!("{}", args.out.display());
    Ok(())
}

/// Snapshot path for a report file: `report.csv` → `report.config.json`.
pub fn report_snapshot_path(report: &Path) -> PathBuf {
    report.with_extension("config.json")
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let mut cfg = resolved(args.config.as_deref(), None)?;
    if let Some(s) = &args.split {
        cfg.eval.split = s.clone();
    }
    if let Some(t) = args.threshold {
        cfg.eval.threshold = t;
    }
    cfg.eval.extended |= args.extended;
    cfg.validate()?;

    let model = load_model(&args.model)?;
    let data = load_split(&cfg.data_dir(args.data.as_deref())?, &cfg.eval.split)?;
    check_images_fit(&model, &data)?;
    let eta = match &args.noise {
        Some(p) => {
            let (eta, _) = load_noise(p)?;
            check_noise_fits(&eta, &model.config)?;
            Some(eta)
        }
        None => None,
    };
    let defense = match &args.defense {
        Some(dir) => Some(load_defense(dir, &model)?),
        None => None,
    };
    if let (Some(d), Some(e)) = (&defense, &eta) {
        if d.noise_hash != noise_hash(e) {
            warn!(
                "defense was trained against a different noise tensor (hash {} vs {})",
                d.noise_hash,
                noise_hash(e)
            );
        }
    }

    let r = evaluate(&model, &data, eta.as_ref(), defense.as_ref(), cfg.eval.threshold)?;
    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(parent)?;
    }
    write_text(&args.report, &r.to_csv(data.schema.names(), cfg.eval.extended))?;
    write_snapshot(&report_snapshot_path(&args.report), "eval", cfg.seed.unwrap_or(0), &cfg)?;
    println!(
        "mA {:.4} accuracy {:.4} precision {:.4} recall {:.4} F1 {:.4}",
        r.m_a, r.accuracy, r.precision, r.recall, r.f1
    );
    Ok(())
}

pub fn export_noise(args: &ExportArgs) -> anyhow::Result<()> {
    if args.amplification.is_nan() || args.amplification <= 0.0 {
        return Err(UsageError(format!("amplification must be positive, got {}", args.amplification)).into());
    }
    let (eta, _) = load_noise(&args.noise)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(parent)?;
    }
    write_ppm(&args.out, &eta.canvas()?, args.amplification)?;
    println!("{}", args.out.display());
    Ok(())
}
