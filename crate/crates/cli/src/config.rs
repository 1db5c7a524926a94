//! Run configuration: a TOML file, overridden by `--set key=value` pairs.

use std::path::{Path, PathBuf};

use graphdiff::data::{NormalizationSpec, PinholeCamera, SynthConfig};
use graphdiff::denoiser::{Activation, DenoiserConfig, DEFAULT_MODEL_DIM, DEFAULT_NUM_BLOCKS};
use graphdiff::diffusion::{SamplerConfig, SamplerMode, DEFAULT_CLIP};
use graphdiff::evaluation::{Aggregation, AlignmentKind, EvalConfig};
use graphdiff::schedule::ScheduleKind;
use graphdiff::skeleton::{SkeletonSpec, H36M17};
use graphdiff::training::{AdamConfig, LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub model_dim: usize,
    pub num_blocks: usize,
    pub time_embed_dim: Option<usize>,
    pub activation: Activation,
    /// Builtin skeleton name or path to a skeleton TOML file.
    pub skeleton: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            model_dim: DEFAULT_MODEL_DIM,
            num_blocks: DEFAULT_NUM_BLOCKS,
            time_embed_dim: None,
            activation: Activation::Relu,
            skeleton: H36M17.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_shrink: f64,
    pub flip_probability: f64,
    pub checkpoint_every: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_shrink: t.lr_shrink,
            flip_probability: t.flip_probability,
            checkpoint_every: t.checkpoint_every,
            adam: t.adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub mode: SamplerMode,
    pub num_hypotheses: usize,
    pub ddim_steps: usize,
    pub ddim_eta: f64,
    /// Bound on clean-pose estimates; `0` disables clipping.
    pub clip_denoised: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            mode: s.mode,
            num_hypotheses: s.num_hypotheses,
            ddim_steps: s.ddim_steps,
            ddim_eta: s.ddim_eta,
            clip_denoised: DEFAULT_CLIP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub aggregation: Aggregation,
    pub alignment: AlignmentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory in the pose-file format.
    pub dir: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    pub normalization: NormalizationSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: None,
            train_split: "train".into(),
            eval_split: "test".into(),
            normalization: NormalizationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub size: usize,
    /// Items in the separately generated `test` split; `0` writes none.
    pub test_size: usize,
    pub max_joint_angle: f64,
    pub max_yaw: f64,
    pub keypoint_noise: f64,
    pub subjects: Vec<String>,
    pub camera: PinholeCamera,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            size: s.size,
            test_size: 16,
            max_joint_angle: s.max_joint_angle,
            max_yaw: s.max_yaw,
            keypoint_noise: s.keypoint_noise,
            subjects: s.subjects,
            camera: PinholeCamera::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub model: ModelSection,
    pub schedule: ScheduleKind,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub data: DataSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelSection::default(),
            schedule: ScheduleKind::default(),
            train: TrainSection::default(),
            loss: LossConfig::default(),
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
            data: DataSection::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Parses the right-hand side of `--set`: a TOML value if it is one,
/// otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("invalid key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("nonempty key");
    let mut cursor = table;
    for p in parents {
        let entry = cursor.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {p} is not a table")))?;
    }
    cursor.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// File (if any) < `--set` overrides < `--seed`.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::from_io(p, e))?;
                toml::from_str::<Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(Value::Table(schedule)) = table.get_mut("schedule") {
            schedule.entry("kind").or_insert_with(|| Value::String("cosine".into()));
        }
        let mut config: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn skeleton(&self) -> Result<SkeletonSpec, CliError> {
        Ok(SkeletonSpec::resolve(&self.model.skeleton)?)
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig, CliError> {
        Ok(DenoiserConfig {
            model_dim: self.model.model_dim,
            num_blocks: self.model.num_blocks,
            time_embed_dim: self.model.time_embed_dim,
            activation: self.model.activation,
            skeleton: self.skeleton()?,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_shrink: t.lr_shrink,
            flip_probability: t.flip_probability,
            seed: self.seed,
            schedule: self.schedule,
            checkpoint_every: t.checkpoint_every,
            adam: t.adam,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            mode: s.mode,
            num_hypotheses: s.num_hypotheses,
            ddim_steps: s.ddim_steps,
            ddim_eta: s.ddim_eta,
            seed: self.seed,
            clip_denoised: (s.clip_denoised > 0.0).then_some(s.clip_denoised),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            num_hypotheses: self.sampler.num_hypotheses,
            aggregation: self.eval.aggregation,
            alignment: self.eval.alignment,
        }
    }

    pub fn synth_config(&self, size: usize, stream: u64) -> SynthConfig {
        SynthConfig {
            seed: graphdiff::rng::derive_seed(self.seed, &[stream]),
            size,
            max_joint_angle: self.synth.max_joint_angle,
            max_yaw: self.synth.max_yaw,
            keypoint_noise: self.synth.keypoint_noise,
            subjects: self.synth.subjects.clone(),
            pose_scale_mm: self.data.normalization.pose_scale_mm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let c = RunConfig::resolve(
            None,
            &[
                "model.model_dim=64".into(),
                "schedule.kind=\"linear\"".into(),
                "schedule.steps=50".into(),
                "schedule.beta_start=0.001".into(),
                "schedule.beta_end=0.05".into(),
                "sampler.mode=ddim".into(),
                "synth.subjects=[\"S1\", \"S5\"]".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(c.model.model_dim, 64);
        assert_eq!(c.seed, 9);
        assert_eq!(
            c.schedule,
            ScheduleKind::Linear {
                steps: 50,
                beta_start: 0.001,
                beta_end: 0.05
            }
        );
        assert_eq!(c.sampler.mode, SamplerMode::Ddim);
        assert_eq!(c.synth.subjects, vec!["S1", "S5"]);
    }

    #[test]
    fn schedule_kind_defaults_to_cosine() {
        let c = RunConfig::resolve(None, &["schedule.steps=10".into()], None).unwrap();
        assert_eq!(c.schedule, ScheduleKind::Cosine { steps: 10, offset: 0.008 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::resolve(None, &["model.depth=3".into()], None),
            Err(CliError::Config(_))
        ));
        assert!(matches!(RunConfig::resolve(None, &["nonsense".into()], None), Err(CliError::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::resolve(None, &["train.epochs=3".into()], Some(4)).unwrap();
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
