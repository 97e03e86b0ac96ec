//! INI experiment configuration.
//!
//! ```ini
//! [experiment]
//! seed = 0
//! repeats = 5
//!
//! [dataset]
//! num_tuples = 2000
//! injection = on
//! id_count = 3
//!
//! [cocos]
//! epsilon = 0.01
//!
//! [run.sh]
//! loss = triplet_sh
//! lr = 0.0002
//! ```
//!
//! Every `[run.LABEL]` section is one row of the report. Unknown keys are
//! errors. Without a `seed` in `[dataset]` each repetition generates its
//! data from the repetition seed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cocos_core::cocos::CocosConfig;
use cocos_core::losses::{LossKind, LossParams};
use cocos_core::synth::{IdentifierInjection, SynthConfig};
use cocos_core::trainer::TrainConfig;
use ini::{Ini, Properties};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Generated per repetition; `fixed_seed` pins the data across
    /// repetitions.
    Synth { config: SynthConfig, fixed_seed: Option<u64> },
    /// Dataset directory written by `gen`.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub train: TrainConfig,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub dataset: DatasetSource,
    pub runs: Vec<RunSpec>,
    /// `None` disables the COCOS protocol.
    pub cocos: Option<CocosConfig>,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn seeds(&self, run: &RunSpec) -> Vec<u64> {
        (0..run.repeats as u64).map(|r| self.base_seed.wrapping_add(r)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(LabError::Config("no [run.*] sections".into()));
        }
        let mut labels = BTreeSet::new();
        for r in &self.runs {
            if !labels.insert(r.label.as_str()) {
                return Err(LabError::Config(format!("duplicate run label {}", r.label)));
            }
            if r.repeats == 0 {
                return Err(LabError::Config(format!("run {}: repeats must be >= 1", r.label)));
            }
            r.train.validate()?;
        }
        if let DatasetSource::Synth { config, .. } = &self.dataset {
            config.validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::format::read_text(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses config text; relative dataset paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        let mut base_seed = 0;
        let mut default_repeats: usize = 1;
        let mut output = None;
        let mut dataset = DatasetSource::Synth { config: SynthConfig::default(), fixed_seed: None };
        let mut cocos = Some(CocosConfig::default());
        let mut runs = Vec::new();

        if let Some(props) = ini.section(Some("experiment")) {
            let mut sec = Section::new("experiment", props);
            base_seed = sec.get("seed")?.unwrap_or(base_seed);
            default_repeats = sec.get("repeats")?.unwrap_or(default_repeats);
            output = sec.get::<String>("output")?.map(|p| base_dir.join(p));
            sec.finish()?;
        }
        for (name, props) in ini.iter() {
            let mut sec = Section::new(name.unwrap_or("(global)"), props);
            match name {
                None if props.is_empty() => {}
                Some("experiment") => continue,
                Some("dataset") => dataset = parse_dataset(&mut sec, base_dir)?,
                Some("cocos") => {
                    let d = CocosConfig::default();
                    let enabled = sec.get("enabled")?.unwrap_or(true);
                    let c = CocosConfig {
                        epsilon: sec.get("epsilon")?.unwrap_or(d.epsilon),
                        batch_n: sec.get("batch_n")?.unwrap_or(d.batch_n),
                        seed: 0,
                    };
                    cocos = enabled.then_some(c);
                }
                Some(s) if s.starts_with("run.") => {
                    let label = s["run.".len()..].trim().to_string();
                    if label.is_empty() || label.contains(|c: char| c.is_whitespace() || c == ',' || c == '/') {
                        return Err(LabError::Config(format!("bad run label {label:?}")));
                    }
                    runs.push(parse_run(label, &mut sec, default_repeats)?);
                }
                Some(other) => return Err(LabError::Config(format!("unknown section [{other}]"))),
                None => return Err(LabError::Config("keys outside a section".into())),
            }
            sec.finish()?;
        }
        let cfg = Self { base_seed, dataset, runs, cocos, output };
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Section<'a> {
    name: &'a str,
    props: &'a Properties,
    used: BTreeSet<&'a str>,
}

impl<'a> Section<'a> {
    fn new(name: &'a str, props: &'a Properties) -> Self {
        Self { name, props, used: BTreeSet::new() }
    }

    fn get<T: FromStr>(&mut self, key: &'a str) -> Result<Option<T>> {
        self.used.insert(key);
        match self.props.get(key) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| LabError::Config(format!("[{}] {key}: cannot parse {v:?}", self.name))),
        }
    }

    fn finish(self) -> Result<()> {
        for (k, _) in self.props.iter() {
            if !self.used.contains(k) {
                return Err(LabError::Config(format!("[{}] unknown key {k}", self.name)));
            }
        }
        Ok(())
    }
}

fn parse_dataset(sec: &mut Section<'_>, base_dir: &Path) -> Result<DatasetSource> {
    if let Some(p) = sec.get::<String>("path")? {
        return Ok(DatasetSource::Path(base_dir.join(p)));
    }
    let d = SynthConfig::default();
    let injection = match sec.get::<String>("injection")?.as_deref().unwrap_or("off") {
        "off" => None,
        "on" => {
            let d = IdentifierInjection::default();
            Some(IdentifierInjection {
                count: sec.get("id_count")?.unwrap_or(d.count),
                id_dim: sec.get("id_dim")?.unwrap_or(d.id_dim),
                scale: sec.get("id_scale")?.unwrap_or(d.scale),
            })
        }
        other => return Err(LabError::Config(format!("[dataset] injection must be on or off, got {other}"))),
    };
    let fixed_seed = sec.get("seed")?;
    let config = SynthConfig {
        num_tuples: sec.get("num_tuples")?.unwrap_or(d.num_tuples),
        captions_per_image: sec.get("captions_per_image")?.unwrap_or(d.captions_per_image),
        core_dim: sec.get("core_dim")?.unwrap_or(d.core_dim),
        nuisance_dim: sec.get("nuisance_dim")?.unwrap_or(d.nuisance_dim),
        noise_scale: sec.get("noise_scale")?.unwrap_or(d.noise_scale),
        injection,
        val_fraction: sec.get("val_fraction")?.unwrap_or(d.val_fraction),
        test_fraction: sec.get("test_fraction")?.unwrap_or(d.test_fraction),
        seed: fixed_seed.unwrap_or(0),
    };
    Ok(DatasetSource::Synth { config, fixed_seed })
}

fn parse_run(label: String, sec: &mut Section<'_>, default_repeats: usize) -> Result<RunSpec> {
    let d = TrainConfig::default();
    let dp = LossParams::default();
    let loss: LossKind = match sec.get::<String>("loss")? {
        Some(s) => s.parse()?,
        None => label.parse().map_err(|_| LabError::Config(format!("[run.{label}] needs a loss")))?,
    };
    let params = LossParams::new(
        sec.get("alpha")?.unwrap_or(dp.alpha),
        sec.get("tau_ntxent")?.unwrap_or(dp.tau_ntxent),
        sec.get("tau_smooth")?.unwrap_or(dp.tau_smooth),
    )?;
    let lr_decay_epoch = match sec.get::<String>("lr_decay_epoch")?.as_deref() {
        None => d.lr_decay_epoch,
        Some("none") => None,
        Some(v) => Some(v.parse().map_err(|_| LabError::Config(format!("[run.{label}] bad lr_decay_epoch {v}")))?),
    };
    let train = TrainConfig {
        loss,
        params,
        epochs: sec.get("epochs")?.unwrap_or(d.epochs),
        lr: sec.get("lr")?.unwrap_or(d.lr),
        lr_decay_epoch,
        lr_decay: sec.get("lr_decay")?.unwrap_or(d.lr_decay),
        batch_n: sec.get("batch_n")?.unwrap_or(d.batch_n),
        d_out: sec.get("d_out")?.unwrap_or(d.d_out),
        seed: 0,
        scale_grouped_epochs: sec.get("scale_grouped_epochs")?.unwrap_or(d.scale_grouped_epochs),
    };
    let repeats = sec.get("repeats")?.unwrap_or(default_repeats);
    Ok(RunSpec { label, train, repeats })
}
