//! Run configuration: one flat, fully-enumerated key space.
//!
//! A run is described by a JSON object whose keys are dotted paths
//! (`"train.batch"`, `"model.deter"`, …). Every key has a default, unknown
//! keys are rejected by name, and the whole configuration hashes to a single
//! digest that metrics headers and checkpoints embed, so artifacts can never
//! be mixed across incompatible runs. The output directory is deliberately
//! *not* part of the keyed configuration: two runs that differ only in where
//! they write are the same experiment.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::env::{Ablation, EnvParams};
use crate::sim::{SimParams, TaskGeometry, Vec3};
use crate::tactile::GelParams;
use crate::worldmodel::ModelDims;

/// Loop and optimiser settings that belong to the trainer itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    /// Total environment steps to collect (resets excluded).
    pub env_steps: u64,
    /// Replay buffer capacity in steps; oldest entries are overwritten.
    pub replay_capacity: usize,
    /// Sequences per training batch.
    pub batch: usize,
    /// Steps per training sequence.
    pub seq_len: usize,
    /// Replayed steps trained per collected step: grad steps per chunk are
    /// `chunk * ratio / (batch * seq_len)`, carried fractionally.
    pub replay_ratio: f64,
    /// Environment steps collected between training bursts.
    pub collect_chunk: u64,
    /// Environment steps between evaluation rounds (0 disables).
    pub eval_every: u64,
    /// Episodes per evaluation round.
    pub eval_episodes: u32,
    /// Environment steps between checkpoints (0 disables periodic saves).
    pub checkpoint_every: u64,
    /// Random-action steps before any gradient step.
    pub prefill: u64,
    /// Imagination rollouts per gradient step (capped at `batch * seq_len`
    /// posterior states; a random subset is used when smaller).
    pub imag_batch: usize,
    /// World-model learning rate.
    pub wm_lr: f64,
    /// Actor and critic learning rate.
    pub ac_lr: f64,
    /// Global-norm gradient clip for the world model.
    pub wm_clip: f64,
    /// Global-norm gradient clip for actor and critic.
    pub ac_clip: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            env_steps: 150_000,
            replay_capacity: 100_000,
            batch: 8,
            seq_len: 32,
            replay_ratio: 32.0,
            collect_chunk: 100,
            eval_every: 2_500,
            eval_episodes: 20,
            checkpoint_every: 25_000,
            prefill: 1_000,
            imag_batch: 256,
            wm_lr: 3e-4,
            ac_lr: 1e-4,
            wm_clip: 1_000.0,
            ac_clip: 100.0,
        }
    }
}

/// Everything a training run needs, with the output directory kept apart
/// from the hashed key space.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    /// Where metrics, checkpoints and reports are written. Not a config
    /// key and not hashed.
    pub out_dir: PathBuf,
    pub geom: TaskGeometry,
    pub sim: SimParams,
    pub gel: GelParams,
    pub env: EnvParams,
    pub model: ModelDims,
    pub agent: AgentConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelDims::default();
        let agent = AgentConfig::for_model(&model);
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            geom: TaskGeometry::default(),
            sim: SimParams::default(),
            gel: GelParams::default(),
            env: EnvParams::default(),
            model,
            agent,
            train: TrainSettings::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: expected {expected}")]
    BadValue { key: String, expected: &'static str },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("config file is not a JSON object")]
    NotAnObject,
    #[error("config is not valid JSON: {0}")]
    Parse(String),
}

/// One pass over every configuration field. `set` and `to_flat` are both
/// implementations of this visitor, so the key list exists exactly once.
trait Visit {
    fn u64(&mut self, key: &'static str, field: &mut u64);
    fn u32(&mut self, key: &'static str, field: &mut u32);
    fn usize(&mut self, key: &'static str, field: &mut usize);
    fn f64(&mut self, key: &'static str, field: &mut f64);
    fn vec3(&mut self, key: &'static str, field: &mut Vec3);
    fn ablation(&mut self, key: &'static str, field: &mut Ablation);
}

impl RunConfig {
    fn visit(&mut self, v: &mut impl Visit) {
        v.u64("seed", &mut self.seed);
        v.ablation("ablation", &mut self.env.ablation);

        v.f64("geom.peg_radius", &mut self.geom.peg_radius);
        v.f64("geom.hole_radius", &mut self.geom.hole_radius);
        v.f64("geom.hole_depth", &mut self.geom.hole_depth);
        v.vec3("geom.goal", &mut self.geom.goal);
        v.vec3("geom.goal_tol", &mut self.geom.goal_tol);
        v.vec3("geom.workspace_min", &mut self.geom.workspace_min);
        v.vec3("geom.workspace_max", &mut self.geom.workspace_max);

        v.vec3("sim.stiffness", &mut self.sim.stiffness);
        v.f64("sim.max_step", &mut self.sim.max_step);

        v.f64("gel.pixel_pitch", &mut self.gel.pixel_pitch);
        v.f64("gel.band_half_width", &mut self.gel.band_half_width);
        v.f64("gel.band_half_length", &mut self.gel.band_half_length);
        v.f64("gel.area_gain", &mut self.gel.area_gain);
        v.f64("gel.shear_gain", &mut self.gel.shear_gain);
        v.f64("gel.base_depth", &mut self.gel.base_depth);
        v.f64("gel.normal_gain", &mut self.gel.normal_gain);
        v.f64("gel.gel_thickness", &mut self.gel.gel_thickness);
        v.f64("gel.smooth_sigma", &mut self.gel.smooth_sigma);
        v.f64("gel.noise_sigma", &mut self.gel.noise_sigma);
        v.f64("gel.light_elevation_deg", &mut self.gel.light_elevation_deg);
        v.f64("gel.light_intensity", &mut self.gel.light_intensity);

        v.u64("env.horizon", &mut self.env.horizon);
        v.f64("env.offset_range", &mut self.env.offset_range);
        v.vec3("env.start_min", &mut self.env.start_min);
        v.vec3("env.start_max", &mut self.env.start_max);

        v.usize("model.conv_base", &mut self.model.conv_base);
        v.usize("model.embed", &mut self.model.embed);
        v.usize("model.deter", &mut self.model.deter);
        v.usize("model.groups", &mut self.model.groups);
        v.usize("model.classes", &mut self.model.classes);
        v.usize("model.hidden", &mut self.model.hidden);
        v.usize("model.hidden_layers", &mut self.model.hidden_layers);
        v.usize("model.reward_bins", &mut self.model.reward_bins);
        v.f64("model.reward_limit", &mut self.model.reward_limit);
        v.f64("model.unimix", &mut self.model.unimix);
        v.f64("model.free_bits", &mut self.model.free_bits);
        v.f64("model.proprio_scale", &mut self.model.proprio_scale);
        v.f64("model.beta_pred", &mut self.model.beta_pred);
        v.f64("model.beta_dyn", &mut self.model.beta_dyn);
        v.f64("model.beta_rep", &mut self.model.beta_rep);

        v.usize("agent.hidden", &mut self.agent.hidden);
        v.usize("agent.layers", &mut self.agent.layers);
        v.usize("agent.value_bins", &mut self.agent.value_bins);
        v.f64("agent.value_limit", &mut self.agent.value_limit);
        v.usize("agent.horizon", &mut self.agent.horizon);
        v.f64("agent.gamma", &mut self.agent.gamma);
        v.f64("agent.lambda", &mut self.agent.lambda);
        v.f64("agent.entropy_scale", &mut self.agent.entropy_scale);
        v.f64("agent.range_decay", &mut self.agent.range_decay);
        v.f64("agent.target_tau", &mut self.agent.target_tau);
        v.f64("agent.target_reg", &mut self.agent.target_reg);
        v.f64("agent.min_std", &mut self.agent.min_std);
        v.f64("agent.max_std", &mut self.agent.max_std);

        v.u64("train.env_steps", &mut self.train.env_steps);
        v.usize("train.replay_capacity", &mut self.train.replay_capacity);
        v.usize("train.batch", &mut self.train.batch);
        v.usize("train.seq_len", &mut self.train.seq_len);
        v.f64("train.replay_ratio", &mut self.train.replay_ratio);
        v.u64("train.collect_chunk", &mut self.train.collect_chunk);
        v.u64("train.eval_every", &mut self.train.eval_every);
        v.u32("train.eval_episodes", &mut self.train.eval_episodes);
        v.u64("train.checkpoint_every", &mut self.train.checkpoint_every);
        v.u64("train.prefill", &mut self.train.prefill);
        v.usize("train.imag_batch", &mut self.train.imag_batch);
        v.f64("train.wm_lr", &mut self.train.wm_lr);
        v.f64("train.ac_lr", &mut self.train.ac_lr);
        v.f64("train.wm_clip", &mut self.train.wm_clip);
        v.f64("train.ac_clip", &mut self.train.ac_clip);
    }

    /// The ablation is stored on the environment parameters, where the
    /// observation pipeline applies it.
    pub fn ablation(&self) -> Ablation {
        self.env.ablation
    }

    /// Sets one field by its dotted key.
    pub fn set(&mut self, key: &str, value: &Value) -> Result<(), ConfigError> {
        let mut setter = Setter { key, value, outcome: None };
        self.visit(&mut setter);
        match setter.outcome {
            Some(result) => result,
            None => Err(ConfigError::UnknownKey(key.to_owned())),
        }
    }

    /// Every field as a sorted `key -> value` map. This is the canonical
    /// form: hash input, metrics header and checkpoint config all use it.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut collector = Collector { map: BTreeMap::new() };
        self.clone().visit(&mut collector);
        collector.map
    }

    /// Canonical JSON: the flat map serialised with sorted keys.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.to_flat()).expect("flat config serialises")
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    /// The digest as lowercase hex, the form used in file headers.
    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    /// Builds a config from a JSON object of dotted keys, starting from the
    /// defaults. Unknown keys and mistyped values are rejected by name.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let map = value.as_object().ok_or(ConfigError::NotAnObject)?;
        let mut cfg = Self::default();
        for (key, val) in map {
            cfg.set(key, val)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The agent configuration with its widths derived from the model.
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            feature_dim: self.model.feature_dim(),
            action_dim: self.model.action_dim,
            ..self.agent.clone()
        }
    }

    /// Range checks that turn nonsense into a named error instead of a
    /// panic deep inside the run.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &str, message: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid { key: key.to_owned(), message: message.into() })
        }
        let t = &self.train;
        if t.batch == 0 {
            return bad("train.batch", "must be at least 1");
        }
        if t.seq_len == 0 {
            return bad("train.seq_len", "must be at least 1");
        }
        if t.replay_capacity < t.seq_len {
            return bad("train.replay_capacity", "must hold at least one sequence window");
        }
        if t.collect_chunk == 0 {
            return bad("train.collect_chunk", "must be at least 1");
        }
        if !(t.replay_ratio.is_finite() && t.replay_ratio >= 0.0) {
            return bad("train.replay_ratio", "must be finite and non-negative");
        }
        if t.replay_ratio > 0.0 && t.prefill < (t.batch * t.seq_len) as u64 {
            return bad(
                "train.prefill",
                format!("must cover one batch: at least {}", t.batch * t.seq_len),
            );
        }
        if t.imag_batch == 0 {
            return bad("train.imag_batch", "must be at least 1");
        }
        for (key, value) in [
            ("train.wm_lr", t.wm_lr),
            ("train.ac_lr", t.ac_lr),
            ("train.wm_clip", t.wm_clip),
            ("train.ac_clip", t.ac_clip),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return bad(key, "must be finite and positive");
            }
        }
        let a = &self.agent;
        if a.horizon == 0 {
            return bad("agent.horizon", "must be at least 1");
        }
        if !(a.gamma > 0.0 && a.gamma <= 1.0) {
            return bad("agent.gamma", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&a.lambda) {
            return bad("agent.lambda", "must lie in [0, 1]");
        }
        if !(a.min_std > 0.0 && a.max_std >= a.min_std) {
            return bad("agent.min_std", "needs 0 < min_std <= max_std");
        }
        if a.value_bins < 2 {
            return bad("agent.value_bins", "needs at least 2 bins");
        }
        let m = &self.model;
        for (key, value) in [
            ("model.conv_base", m.conv_base),
            ("model.embed", m.embed),
            ("model.deter", m.deter),
            ("model.groups", m.groups),
            ("model.classes", m.classes),
            ("model.hidden", m.hidden),
            ("model.hidden_layers", m.hidden_layers),
        ] {
            if value == 0 {
                return bad(key, "must be at least 1");
            }
        }
        if m.reward_bins < 2 {
            return bad("model.reward_bins", "needs at least 2 bins");
        }
        if !(0.0..1.0).contains(&m.unimix) {
            return bad("model.unimix", "must lie in [0, 1)");
        }
        if m.free_bits < 0.0 {
            return bad("model.free_bits", "must be non-negative");
        }
        if self.env.horizon == 0 {
            return bad("env.horizon", "must be at least 1");
        }
        self.geom
            .validate()
            .map_err(|e| ConfigError::Invalid { key: "geom".to_owned(), message: e.to_string() })?;
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

struct Collector {
    map: BTreeMap<String, Value>,
}

impl Visit for Collector {
    fn u64(&mut self, key: &'static str, field: &mut u64) {
        self.map.insert(key.to_owned(), Value::from(*field));
    }
    fn u32(&mut self, key: &'static str, field: &mut u32) {
        self.map.insert(key.to_owned(), Value::from(*field));
    }
    fn usize(&mut self, key: &'static str, field: &mut usize) {
        self.map.insert(key.to_owned(), Value::from(*field as u64));
    }
    fn f64(&mut self, key: &'static str, field: &mut f64) {
        self.map.insert(key.to_owned(), Value::from(*field));
    }
    fn vec3(&mut self, key: &'static str, field: &mut Vec3) {
        self.map.insert(key.to_owned(), Value::from(field.to_vec()));
    }
    fn ablation(&mut self, key: &'static str, field: &mut Ablation) {
        self.map.insert(key.to_owned(), Value::from(field.as_str()));
    }
}

struct Setter<'a> {
    key: &'a str,
    value: &'a Value,
    outcome: Option<Result<(), ConfigError>>,
}

impl Setter<'_> {
    fn try_key<T>(
        &mut self,
        key: &'static str,
        field: &mut T,
        parse: impl FnOnce(&Value) -> Option<T>,
        expected: &'static str,
    ) {
        if self.key != key || self.outcome.is_some() {
            return;
        }
        self.outcome = Some(match parse(self.value) {
            Some(v) => {
                *field = v;
                Ok(())
            }
            None => Err(ConfigError::BadValue { key: key.to_owned(), expected }),
        });
    }
}

impl Visit for Setter<'_> {
    fn u64(&mut self, key: &'static str, field: &mut u64) {
        self.try_key(key, field, Value::as_u64, "a non-negative integer");
    }
    fn u32(&mut self, key: &'static str, field: &mut u32) {
        self.try_key(
            key,
            field,
            |v| v.as_u64().and_then(|n| u32::try_from(n).ok()),
            "a non-negative 32-bit integer",
        );
    }
    fn usize(&mut self, key: &'static str, field: &mut usize) {
        self.try_key(
            key,
            field,
            |v| v.as_u64().and_then(|n| usize::try_from(n).ok()),
            "a non-negative integer",
        );
    }
    fn f64(&mut self, key: &'static str, field: &mut f64) {
        self.try_key(key, field, |v| v.as_f64().filter(|x| x.is_finite()), "a finite number");
    }
    fn vec3(&mut self, key: &'static str, field: &mut Vec3) {
        self.try_key(
            key,
            field,
            |v| {
                let arr = v.as_array()?;
                if arr.len() != 3 {
                    return None;
                }
                let mut out = [0.0; 3];
                for (slot, item) in out.iter_mut().zip(arr) {
                    *slot = item.as_f64().filter(|x| x.is_finite())?;
                }
                Some(out)
            },
            "an array of three finite numbers",
        );
    }
    fn ablation(&mut self, key: &'static str, field: &mut Ablation) {
        self.try_key(
            key,
            field,
            |v| v.as_str().and_then(|s| s.parse().ok()),
            "one of \"none\", \"no_tactile\", \"no_proprio\"",
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_flat_key_parses_back_to_the_same_config() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_json();
        let back = RunConfig::from_json_str(&text).unwrap();
        assert_eq!(back.to_flat(), cfg.to_flat());
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_json_str(r#"{"train.batch_size": 8}"#).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("train.batch_size".to_owned()));
        assert!(err.to_string().contains("train.batch_size"));
    }

    #[test]
    fn mistyped_values_name_the_key_and_the_expectation() {
        let err = RunConfig::from_json_str(r#"{"train.batch": "eight"}"#).unwrap_err();
        assert_eq!(
            err,
            ConfigError::BadValue { key: "train.batch".to_owned(), expected: "a non-negative integer" }
        );
        let err = RunConfig::from_json_str(r#"{"geom.goal": [1, 2]}"#).unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { .. }));
    }

    #[test]
    fn dotted_keys_reach_nested_fields() {
        let cfg = RunConfig::from_json_str(
            r#"{"model.deter": 64, "agent.gamma": 0.9, "sim.stiffness": [500, 500, 800],
                "ablation": "no_tactile", "seed": 7}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.deter, 64);
        assert_eq!(cfg.agent.gamma, 0.9);
        assert_eq!(cfg.sim.stiffness, [500.0, 500.0, 800.0]);
        assert_eq!(cfg.ablation(), Ablation::NoTactile);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn seed_and_ablation_change_the_hash_but_the_output_directory_does_not() {
        let base = RunConfig::default();
        let mut seeded = base.clone();
        seeded.seed = 1;
        assert_ne!(base.hash(), seeded.hash());

        let mut ablated = base.clone();
        ablated.env.ablation = Ablation::NoTactile;
        assert_ne!(base.hash(), ablated.hash());

        let mut moved = base.clone();
        moved.out_dir = PathBuf::from("/somewhere/else");
        assert_eq!(base.hash(), moved.hash());
        assert!(!base.canonical_json().contains("out_dir"));
    }

    #[test]
    fn out_of_range_values_are_named() {
        let err = RunConfig::from_json_str(r#"{"agent.gamma": 0.0}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "agent.gamma"));
        let err = RunConfig::from_json_str(r#"{"train.batch": 0}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "train.batch"));
        let err = RunConfig::from_json_str(r#"{"geom.peg_radius": 0.02}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "geom"));
    }

    #[test]
    fn derived_agent_widths_follow_the_model() {
        let cfg =
            RunConfig::from_json_str(r#"{"model.deter": 32, "model.groups": 4, "model.classes": 4}"#)
                .unwrap();
        let agent = cfg.agent_config();
        assert_eq!(agent.feature_dim, 32 + 16);
        assert_eq!(agent.action_dim, 3);
    }

    #[test]
    fn canonical_json_is_sorted_and_stable() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_json();
        assert!(text.starts_with(r#"{"ablation":"#));
        let flat = cfg.to_flat();
        let keys: Vec<&String> = flat.keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(text, RunConfig::default().canonical_json());
    }
}
