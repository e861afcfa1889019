//! Layered run configuration: defaults, then an INI file, then `MF_*`
//! environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use multiformer::datakit::SynthConfig;
use multiformer::pose::DecodeParams;
use multiformer::train::{EvalConfig, OptimizerChoice, TrainConfig};
use multiformer::{Error, Result};

pub const ENV_PREFIX: &str = "MF_";
/// Variables under the prefix that name flags rather than config keys.
const ENV_RESERVED: &[&str] = &["MF_CONFIG"];

/// Every accepted `section.key`.
pub const KEYS: &[&str] = &[
    "model.preset",
    "model.stages",
    "train.lr",
    "train.batch_size",
    "train.epochs",
    "train.decay_factor",
    "train.decay_interval",
    "train.seed",
    "train.optimizer",
    "train.bn_momentum",
    "synth.samples",
    "synth.persons",
    "synth.seed",
    "synth.noise_sigma",
    "synth.val_fraction",
    "synth.keyframes",
    "render.sigma",
    "render.limb_width",
    "decode.threshold",
    "decode.max_candidates",
    "decode.paf_samples",
    "decode.score_gate",
    "decode.fraction_gate",
    "decode.subpixel",
    "decode.min_keypoints",
    "eval.alphas",
    "eval.batch_size",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

/// Typed settings for every subcommand.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub synth_seed: u64,
    pub decode: DecodeParams,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    /// Raw override per key with the layer it came from; later layers win.
    pub values: BTreeMap<String, (String, Source)>,
}

fn bad_key(key: &str, origin: &str) -> Error {
    Error::config(format!(
        "unknown configuration key `{key}` ({origin}); accepted keys: {}",
        KEYS.join(", ")
    ))
}

impl RunConfig {
    /// Merges file, environment and flag layers; unknown keys are errors.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.merge_ini(&text, path)?;
        }
        let mut env: Vec<_> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (var, value) in env {
            if ENV_RESERVED.contains(&var.as_str()) {
                continue;
            }
            let key = env_key(&var).ok_or_else(|| bad_key(&var, "environment"))?;
            cfg.values.insert(key, (value, Source::Env));
        }
        for (key, value) in flags {
            if !KEYS.contains(&key.as_str()) {
                return Err(bad_key(key, "flag"));
            }
            cfg.values.insert(key.clone(), (value.clone(), Source::Flag));
        }
        Ok(cfg)
    }

    fn merge_ini(&mut self, text: &str, path: &Path) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::parse(path, e.to_string()))?;
        for (section, props) in &ini {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_string(),
                };
                if !KEYS.contains(&key.as_str()) {
                    return Err(bad_key(&key, &path.display().to_string()));
                }
                self.values.insert(key, (v.to_string(), Source::File));
            }
        }
        Ok(())
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|(_, s)| *s)
    }

    /// Applies every override to the defaults and validates the result.
    pub fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        for (key, (value, _)) in &self.values {
            apply(&mut s, key, value).map_err(|msg| Error::config(format!("{key} = {value:?}: {msg}")))?;
        }
        s.train.validate()?;
        s.synth.validate()?;
        s.decode.validate()?;
        if s.eval.alphas.is_empty() || s.eval.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::config("eval.alphas must be positive"));
        }
        if s.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be positive"));
        }
        Ok(s)
    }
}

/// `MF_TRAIN_BATCH_SIZE` → `train.batch_size`.
fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
    let (section, key) = rest.split_once('_')?;
    let key = format!("{section}.{key}");
    KEYS.contains(&key.as_str()).then_some(key)
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| e.to_string())
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got `{other}`")),
    }
}

pub fn parse_alphas(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(num::<f64>).collect()
}

fn apply(s: &mut Settings, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "model.preset" => s.train.preset = v.trim().parse().map_err(|e: Error| e.to_string())?,
        "model.stages" => s.train.stages = num(v)?,
        "train.lr" => s.train.lr = num(v)?,
        "train.batch_size" => s.train.batch_size = num(v)?,
        "train.epochs" => s.train.epochs = num(v)?,
        "train.decay_factor" => s.train.decay_factor = num(v)?,
        "train.decay_interval" => s.train.decay_interval = num(v)?,
        "train.seed" => s.train.seed = num(v)?,
        "train.optimizer" => {
            s.train.optimizer = match v.trim().to_ascii_lowercase().as_str() {
                "adam" => OptimizerChoice::Adam,
                "sgd" => OptimizerChoice::Sgd,
                other => return Err(format!("expected adam or sgd, got `{other}`")),
            }
        }
        "train.bn_momentum" => s.train.bn_momentum = num(v)?,
        "synth.samples" => s.synth.samples = num(v)?,
        "synth.persons" => s.synth.scene.persons = num(v)?,
        "synth.seed" => s.synth_seed = num(v)?,
        "synth.noise_sigma" => s.synth.scene.noise_sigma = num(v)?,
        "synth.val_fraction" => s.synth.val_fraction = num(v)?,
        "synth.keyframes" => s.synth.scene.keyframes = num(v)?,
        "render.sigma" => s.train.render.sigma = num(v)?,
        "render.limb_width" => s.train.render.limb_width = num(v)?,
        "decode.threshold" => s.decode.threshold = num(v)?,
        "decode.max_candidates" => s.decode.max_candidates = num(v)?,
        "decode.paf_samples" => s.decode.paf_samples = num(v)?,
        "decode.score_gate" => s.decode.score_gate = num(v)?,
        "decode.fraction_gate" => s.decode.fraction_gate = num(v)?,
        "decode.subpixel" => s.decode.subpixel = flag(v)?,
        "decode.min_keypoints" => s.decode.min_keypoints = num(v)?,
        "eval.alphas" => s.eval.alphas = parse_alphas(v)?,
        "eval.batch_size" => s.eval.batch_size = num(v)?,
        _ => unreachable!("keys are checked on load"),
    }
    Ok(())
}

/// Current value of `key` in `s`, formatted as it would be written.
pub fn show(s: &Settings, key: &str) -> String {
    match key {
        "model.preset" => s.train.preset.name().to_string(),
        "model.stages" => s.train.stages.to_string(),
        "train.lr" => s.train.lr.to_string(),
        "train.batch_size" => s.train.batch_size.to_string(),
        "train.epochs" => s.train.epochs.to_string(),
        "train.decay_factor" => s.train.decay_factor.to_string(),
        "train.decay_interval" => s.train.decay_interval.to_string(),
        "train.seed" => s.train.seed.to_string(),
        "train.optimizer" => match s.train.optimizer {
            OptimizerChoice::Adam => "adam".into(),
            OptimizerChoice::Sgd => "sgd".into(),
        },
        "train.bn_momentum" => s.train.bn_momentum.to_string(),
        "synth.samples" => s.synth.samples.to_string(),
        "synth.persons" => s.synth.scene.persons.to_string(),
        "synth.seed" => s.synth_seed.to_string(),
        "synth.noise_sigma" => s.synth.scene.noise_sigma.to_string(),
        "synth.val_fraction" => s.synth.val_fraction.to_string(),
        "synth.keyframes" => s.synth.scene.keyframes.to_string(),
        "render.sigma" => s.train.render.sigma.to_string(),
        "render.limb_width" => s.train.render.limb_width.to_string(),
        "decode.threshold" => s.decode.threshold.to_string(),
        "decode.max_candidates" => s.decode.max_candidates.to_string(),
        "decode.paf_samples" => s.decode.paf_samples.to_string(),
        "decode.score_gate" => s.decode.score_gate.to_string(),
        "decode.fraction_gate" => s.decode.fraction_gate.to_string(),
        "decode.subpixel" => s.decode.subpixel.to_string(),
        "decode.min_keypoints" => s.decode.min_keypoints.to_string(),
        "eval.alphas" => s.eval.alphas.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        "eval.batch_size" => s.eval.batch_size.to_string(),
        _ => String::new(),
    }
}
