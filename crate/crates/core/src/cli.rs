//! Command implementations behind the `vtfusion` binary: reproducible runs
//! driven by plain-text `key = value` config files with flag overrides.

use crate::data::{
    generate_dataset, generate_with_scenes, label_rule, read_dataset, render_sample,
    write_dataset, DataConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelConfig};
use crate::gan::{
    generate_paired_toy, read_pairs, train_gan, train_test_split, translate, GanTrainConfig,
    GeneratorWeights, write_pairs,
};
use crate::ssim::{ssim, SSIM_WINDOW};
use crate::train::{
    ablation_suite, csv_rows_for_fold, evaluate, minimum_force_policy, predict_sample, train,
    write_metrics_csv, AblationVariant, CsvRow, TrainConfig,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Ordered `key = value` settings for one command. Keys are fixed per
/// command; unknown keys are rejected, whether they come from the config
/// file or from flag overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    command: &'static str,
    keys: Vec<(&'static str, String)>,
}

impl RunConfig {
    pub fn new(command: &'static str, defaults: &[(&'static str, &str)]) -> Self {
        RunConfig {
            command,
            keys: defaults.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        for (k, v) in &mut self.keys {
            if *k == key {
                *v = value.trim().to_string();
                return Ok(());
            }
        }
        Err(Error::Config(format!(
            "unknown key '{key}' for {} (known: {})",
            self.command,
            self.keys.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
        )))
    }

    /// Apply a `key = value` file: one setting per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `key=value` flag overrides (these win over the file).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                return Err(Error::Config(format!(
                    "override '{o}' must have the form key=value"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.keys
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("key '{key}' not declared for {}", self.command))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} must be a non-negative integer, got '{}'", self.get(key))))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} must be an integer, got '{}'", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} must be a number, got '{}'", self.get(key))))
    }

    pub fn get_opt_f64(&self, key: &str) -> Result<Option<f64>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.get_f64(key)?))
    }

    pub fn get_path(&self, key: &str) -> Result<PathBuf> {
        let v = self.get(key);
        if v.is_empty() {
            return Err(Error::Config(format!("{key} must be set")));
        }
        Ok(PathBuf::from(v))
    }

    pub fn get_opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// The fully-resolved settings, echoed at the start of every run.
    pub fn echo(&self) -> String {
        let mut out = format!("# {} resolved config\n", self.command);
        for (k, v) in &self.keys {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn gen_data_config() -> RunConfig {
    RunConfig::new(
        "gen-data",
        &[("n", "2000"), ("seed", "0"), ("out", "")],
    )
}

pub fn gen_pairs_config() -> RunConfig {
    RunConfig::new(
        "gen-pairs",
        &[("n", "600"), ("seed", "0"), ("out", "")],
    )
}

pub fn train_config() -> RunConfig {
    RunConfig::new(
        "train",
        &[
            ("data", ""),
            ("out", ""),
            ("metrics", ""),
            ("seed", "0"),
            ("epochs", "20"),
            ("learning_rate", "0.0001"),
            ("batch_size", "32"),
            ("variant", "ours"),
            ("d_model", "32"),
            ("n_heads", "4"),
            ("n_layers", "4"),
            ("stop_at_train_accuracy", ""),
        ],
    )
}

pub fn eval_config() -> RunConfig {
    RunConfig::new("eval", &[("checkpoint", ""), ("data", "")])
}

pub fn ablate_config() -> RunConfig {
    RunConfig::new(
        "ablate",
        &[
            ("data", ""),
            ("test_data", ""),
            ("out", ""),
            ("seed", "0"),
            ("epochs", "12"),
            ("learning_rate", "0.001"),
            ("batch_size", "32"),
            ("folds", "3"),
            ("d_model", "32"),
            ("n_heads", "4"),
            ("n_layers", "4"),
        ],
    )
}

pub fn train_gan_config() -> RunConfig {
    RunConfig::new(
        "train-gan",
        &[
            ("pairs", ""),
            ("out", ""),
            ("out_disc", ""),
            ("seed", "0"),
            ("epochs", "20"),
            ("batch_size", "10"),
            ("learning_rate", "0.0002"),
            ("lambda", "10"),
            ("train_frac", "0.8"),
        ],
    )
}

pub fn eval_gan_config() -> RunConfig {
    RunConfig::new(
        "eval-gan",
        &[("checkpoint", ""), ("pairs", ""), ("train_frac", "0.8")],
    )
}

pub fn policy_demo_config() -> RunConfig {
    RunConfig::new(
        "policy-demo",
        &[
            ("checkpoint", ""),
            ("out", ""),
            ("scenes", "100"),
            ("seed", "0"),
            ("policy_threshold", "0.5"),
            ("f_min", "10"),
            ("f_max", "30"),
            ("step", "1"),
        ],
    )
}

fn model_cfg_from(cfg: &RunConfig) -> Result<ModelConfig> {
    let d = cfg.get_usize("d_model")?;
    let n_heads = cfg.get_usize("n_heads")?;
    let n_layers = cfg.get_usize("n_layers")?;
    let mut base = ModelConfig::toy();
    base.attn = crate::attention::MhaConfig::new(d, n_heads)?;
    base.d_ff = 4 * d;
    base.head_hidden = d;
    base.n_fusion_layers = n_layers;
    base.backbone.reduce_dim = d;
    Ok(base)
}

fn train_cfg_from(cfg: &RunConfig, model: &ModelConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        learning_rate: cfg.get_f64("learning_rate")?,
        batch_size: cfg.get_usize("batch_size")?,
        epochs: cfg.get_usize("epochs")?,
        seed: cfg.get_u64("seed")?,
        resize_hw: model.resize_hw,
        crop_hw: model.backbone.input_hw,
        ..TrainConfig::default()
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let n = cfg.get_usize("n")?;
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let seed = cfg.get_u64("seed")?;
    let out = cfg.get_path("out")?;
    let samples = generate_dataset(&DataConfig::default(), n, seed)?;
    write_dataset(&out, &samples)?;
    let pos = samples.iter().filter(|s| s.label == 1).count();
    println!(
        "wrote {} samples to {} (positive fraction {:.4})",
        samples.len(),
        out.display(),
        pos as f64 / samples.len() as f64
    );
    Ok(())
}

pub fn cmd_gen_pairs(cfg: &RunConfig) -> Result<()> {
    let n = cfg.get_usize("n")?;
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let seed = cfg.get_u64("seed")?;
    let out = cfg.get_path("out")?;
    let pairs = generate_paired_toy(n, seed)?;
    write_pairs(&out, &pairs)?;
    println!("wrote {} aligned pairs to {}", pairs.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = read_dataset(&cfg.get_path("data")?)?;
    let out = cfg.get_path("out")?;
    let variant = AblationVariant::from_name(cfg.get("variant"))?;
    let model_cfg = variant.apply(&model_cfg_from(cfg)?);
    let mut train_cfg = train_cfg_from(cfg, &model_cfg)?;
    train_cfg.stop_at_train_accuracy = cfg.get_opt_f64("stop_at_train_accuracy")?;

    let mut model = FusionModel::init(model_cfg, train_cfg.seed)?;
    let history = train(&mut model, &data, &train_cfg)?;
    model.save(&out)?;

    // final metrics come from the reloaded checkpoint, so a later eval of
    // the artifact reproduces them exactly
    let reloaded = FusionModel::load(&out)?;
    let final_metrics = evaluate(&reloaded, &data, 0.5)?;
    println!(
        "trained {} epochs; train accuracy {:.4} precision {} recall {}",
        history.len(),
        final_metrics.accuracy,
        fmt_opt(final_metrics.precision),
        fmt_opt(final_metrics.recall),
    );
    println!("checkpoint written to {}", out.display());

    if let Some(metrics_path) = cfg.get_opt_path("metrics") {
        let rows = csv_rows_for_fold(variant.name(), 0, &history, &final_metrics);
        write_metrics_csv(&metrics_path, &rows)?;
        println!("metrics written to {}", metrics_path.display());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let model = FusionModel::load(&cfg.get_path("checkpoint")?)?;
    let data = read_dataset(&cfg.get_path("data")?)?;
    let m = evaluate(&model, &data, 0.5)?;
    println!(
        "accuracy {:.6} precision {} recall {} (tp {} fp {} tn {} fn {})",
        m.accuracy,
        fmt_opt(m.precision),
        fmt_opt(m.recall),
        m.tp,
        m.fp,
        m.tn,
        m.fn_
    );
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let data = read_dataset(&cfg.get_path("data")?)?;
    let test_data = match cfg.get_opt_path("test_data") {
        Some(p) => Some(read_dataset(&p)?),
        None => None,
    };
    let base = model_cfg_from(cfg)?;
    let train_cfg = train_cfg_from(cfg, &base)?;
    let k = cfg.get_usize("folds")?;

    let rows = ablation_suite(&data, test_data.as_deref(), &base, &train_cfg, k)?;

    let mut csv: Vec<CsvRow> = Vec::new();
    println!("variant,cv_accuracy,cv_std,test_accuracy,test_std");
    for row in &rows {
        for fold in &row.cv.folds {
            csv.extend(csv_rows_for_fold(
                row.variant.name(),
                fold.fold,
                &fold.history,
                &fold.val,
            ));
        }
        let test_txt = match &row.cv.test_summary {
            Some(t) => format!("{:.4},{:.4}", t.mean_accuracy, t.std_accuracy),
            None => "n/a,n/a".into(),
        };
        println!(
            "{},{:.4},{:.4},{}",
            row.variant.name(),
            row.cv.val_summary.mean_accuracy,
            row.cv.val_summary.std_accuracy,
            test_txt
        );
    }
    if let Some(out) = cfg.get_opt_path("out") {
        write_metrics_csv(&out, &csv)?;
        println!("per-epoch metrics written to {}", out.display());
    }
    Ok(())
}

pub fn cmd_train_gan(cfg: &RunConfig) -> Result<()> {
    let pairs = read_pairs(&cfg.get_path("pairs")?)?;
    let out = cfg.get_path("out")?;
    let gan_cfg = GanTrainConfig {
        lambda_bce: cfg.get_f64("lambda")?,
        learning_rate: cfg.get_f64("learning_rate")?,
        batch_size: cfg.get_usize("batch_size")?,
        epochs: cfg.get_usize("epochs")?,
        seed: cfg.get_u64("seed")?,
    };
    let (train_pairs, test_pairs) = train_test_split(&pairs, cfg.get_f64("train_frac")?);
    let (gen, disc, history) = train_gan(&train_pairs, &gan_cfg)?;
    for (e, st) in history.iter().enumerate() {
        println!("epoch {e}: d_loss {:.6} g_loss {:.6}", st.d_loss, st.g_loss);
    }
    gen.save(&out)?;
    println!("generator written to {}", out.display());
    if let Some(disc_path) = cfg.get_opt_path("out_disc") {
        crate::checkpoint::write_checkpoint(
            &disc_path,
            crate::checkpoint::ModelKind::GanDiscriminator,
            &[],
            &disc.named_params(),
        )?;
        println!("discriminator written to {}", disc_path.display());
    }
    let mean = mean_ssim(&gen, &test_pairs)?;
    println!("held-out mean ssim {mean:.4} over {} pairs", test_pairs.len());
    Ok(())
}

fn mean_ssim(gen: &GeneratorWeights, pairs: &[crate::gan::GanPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("no held-out pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        let translated = translate(gen, &p.real)?;
        total += ssim(&translated, &p.sim, SSIM_WINDOW)?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn cmd_eval_gan(cfg: &RunConfig) -> Result<()> {
    let gen = GeneratorWeights::load(&cfg.get_path("checkpoint")?)?;
    let pairs = read_pairs(&cfg.get_path("pairs")?)?;
    let (_, test_pairs) = train_test_split(&pairs, cfg.get_f64("train_frac")?);
    if test_pairs.is_empty() {
        return Err(Error::Config("no held-out pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for (i, p) in test_pairs.iter().enumerate() {
        let translated = translate(&gen, &p.real)?;
        let s = ssim(&translated, &p.sim, SSIM_WINDOW)?;
        println!("pair {i}: ssim {s:.4}");
        total += s;
    }
    println!("mean ssim {:.4} over {} pairs", total / test_pairs.len() as f64, test_pairs.len());
    Ok(())
}

pub fn cmd_policy_demo(cfg: &RunConfig) -> Result<()> {
    let model = FusionModel::load(&cfg.get_path("checkpoint")?)?;
    let n_scenes = cfg.get_usize("scenes")?;
    if n_scenes == 0 {
        return Err(Error::Config("scenes must be positive".into()));
    }
    let seed = cfg.get_u64("seed")?;
    let threshold = cfg.get_f64("policy_threshold")?;
    let (f_min, f_max, step) = (
        cfg.get_f64("f_min")?,
        cfg.get_f64("f_max")?,
        cfg.get_f64("step")?,
    );

    let data_cfg = DataConfig::default();
    // fresh scenes, disjoint from training draws by seed offset
    let (_, scenes) = generate_with_scenes(&data_cfg, n_scenes, seed ^ 0x5CEE_5CEE)?;

    let mut csv = String::from("grasp,chosen_force,predicted,actual\n");
    let mut policy_success = 0usize;
    let mut force_sum = 0.0;
    let (mut fixed10_success, mut fixed30_success) = (0usize, 0usize);
    for (i, scene) in scenes.iter().enumerate() {
        let predictor = |f: f64| -> bool {
            let mut rng = crate::data::sample_rng(seed ^ 0xF0CE, ((i as u64) << 16) | f as u64);
            let sample = render_sample(&data_cfg, scene, f, &mut rng).expect("render");
            predict_sample(&model, &sample).map(|p| p >= threshold).unwrap_or(false)
        };
        let (force, predicted) = minimum_force_policy(predictor, f_min, f_max, step)?;
        let actual = label_rule(scene, force) == 1;
        policy_success += usize::from(actual);
        force_sum += force;
        fixed10_success += usize::from(label_rule(scene, f_min) == 1);
        fixed30_success += usize::from(label_rule(scene, f_max) == 1);
        let _ = writeln!(csv, "{i},{force},{},{}", u8::from(predicted), u8::from(actual));
    }
    if let Some(out) = cfg.get_opt_path("out") {
        std::fs::write(&out, &csv)?;
        println!("per-grasp table written to {}", out.display());
    }
    let n = n_scenes as f64;
    println!(
        "policy: mean force {:.2} N, success {:.1}%",
        force_sum / n,
        100.0 * policy_success as f64 / n
    );
    println!(
        "fixed {f_min} N control: success {:.1}%",
        100.0 * fixed10_success as f64 / n
    );
    println!(
        "fixed {f_max} N control: success {:.1}%",
        100.0 * fixed30_success as f64 / n
    );
    Ok(())
}
