//! Decoder transformer with downward connections, the soft-token feedback
//! variant, LoRA adapters and checkpoint files.

mod cache;
mod checkpoint;
mod config;
mod forward;
mod generate;
mod lora;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{DownCache, KvCache};
pub use checkpoint::{read_checkpoint, write_checkpoint, Blob, CheckpointContents};
pub use config::{
    connection_preset, parse_connections, resolve_connections, triangular, Connection, ConnectionSpec, ModelConfig,
    PRESET_NAMES,
};
pub use forward::{sample_categorical, Forward};
pub use generate::GenerateOptions;
pub use lora::{AdapterHandle, LoraConfig, Target};
pub use params::{Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const NORM_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

/// How the previous position's output feeds the next position's input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feedback {
    #[default]
    None,
    /// Blend the previous output distribution, mapped through the embedding
    /// matrix, into the first-layer input with weight `lambda`.
    SoftToken { lambda: f32 },
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    pub attn_norm: ParamId,
    pub mlp_norm: ParamId,
    /// Indexed by [`Target::slot`].
    pub proj: [ParamId; 7],
    pub lora: [Option<(ParamId, ParamId)>; 7],
}

/// Per-connection low-rank map `D(h) = (h·A + bias_a)·B + bias_b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DownProjection {
    pub a: ParamId,
    pub bias_a: ParamId,
    pub b: ParamId,
    pub bias_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    spec: ConnectionSpec,
    feedback: Feedback,
    lora: Option<LoraConfig>,
    params: ParamStore,
    pub(crate) tok_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) final_norm: ParamId,
    pub(crate) lm_head: ParamId,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) down: Vec<DownProjection>,
}

fn target_dims(cfg: &ModelConfig, t: Target) -> (usize, usize) {
    let (d, kv, inter) = (cfg.d_hidden, cfg.d_kv, cfg.d_inter);
    match t {
        Target::Q | Target::O => (d, d),
        Target::K | Target::V => (d, kv),
        Target::Gate | Target::Up => (d, inter),
        Target::Down => (inter, d),
    }
}

impl Model {
    /// Fresh model. Base weights come from one RNG stream and connection
    /// weights from another, so the same `seed` yields identical base weights
    /// for every connection spec.
    pub fn new(config: ModelConfig, spec: ConnectionSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate_for(config.n_layers)?;
        let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
        base_rng.set_stream(0);
        let mut conn_rng = ChaCha8Rng::seed_from_u64(seed);
        conn_rng.set_stream(1);

        let (d, v) = (config.d_hidden, config.vocab_size);
        let mut params = ParamStore::default();
        let tok_emb = params.add("tok_emb", Tensor::randn([v, d], INIT_STD, &mut base_rng), true)?;
        let pos_emb = params.add(
            "pos_emb",
            Tensor::randn([config.max_seq, d], INIT_STD, &mut base_rng),
            true,
        )?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let attn_norm = params.add(format!("layers.{l}.attn_norm"), Tensor::full([d], 1.0), true)?;
            let mlp_norm = params.add(format!("layers.{l}.mlp_norm"), Tensor::full([d], 1.0), true)?;
            let mut proj = Vec::with_capacity(7);
            for t in Target::ALL {
                let (i, o) = target_dims(&config, t);
                let w = Tensor::randn([i, o], INIT_STD, &mut base_rng);
                proj.push(params.add(format!("layers.{l}.{t}"), w, true)?);
            }
            layers.push(LayerParams {
                attn_norm,
                mlp_norm,
                proj: proj.try_into().expect("seven projections"),
                lora: [None; 7],
            });
        }
        let final_norm = params.add("final_norm", Tensor::full([d], 1.0), true)?;
        let lm_head = params.add("lm_head", Tensor::randn([d, v], INIT_STD, &mut base_rng), true)?;

        let r = spec.proj_rank;
        let mut down = Vec::with_capacity(spec.len());
        for c in spec.connections() {
            let prefix = format!("conn.{}_{}", c.source, c.dest);
            down.push(DownProjection {
                a: params.add(
                    format!("{prefix}.a"),
                    Tensor::randn([d, r], INIT_STD, &mut conn_rng),
                    true,
                )?,
                bias_a: params.add(format!("{prefix}.bias_a"), Tensor::zeros([r]), true)?,
                b: params.add(format!("{prefix}.b"), Tensor::zeros([r, d]), true)?,
                bias_b: params.add(format!("{prefix}.bias_b"), Tensor::zeros([d]), true)?,
            });
        }

        Ok(Model {
            config,
            spec,
            feedback: Feedback::None,
            lora: None,
            params,
            tok_emb,
            pos_emb,
            final_norm,
            lm_head,
            layers,
            down,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn spec(&self) -> &ConnectionSpec {
        &self.spec
    }

    pub fn feedback(&self) -> Feedback {
        self.feedback
    }

    pub fn set_feedback(&mut self, feedback: Feedback) -> Result<()> {
        if let Feedback::SoftToken { lambda } = feedback {
            check_lambda(lambda)?;
        }
        self.feedback = feedback;
        Ok(())
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn down_projections(&self) -> &[DownProjection] {
        &self.down
    }

    /// Group width used by the forward pass.
    pub fn group_size(&self) -> usize {
        self.spec.group_size
    }

    /// Change the group size without touching any weights.
    pub fn set_group_size(&mut self, g: usize) -> Result<()> {
        if g == 0 {
            return Err(Error::param("group size must be at least 1"));
        }
        self.spec.group_size = g;
        Ok(())
    }

    /// Same weights with every connection and its projection removed.
    pub fn without_connections(&self) -> Result<Model> {
        let mut twin = Model::new(self.config.clone(), ConnectionSpec::none(), 0)?;
        if let Some(l) = &self.lora {
            twin.attach_lora(l.rank, &l.targets)?;
        }
        twin.feedback = self.feedback;
        for p in twin.params.iter_mut() {
            let src = self
                .params
                .by_name(&p.name)
                .ok_or_else(|| Error::State(format!("parameter {} missing from source model", p.name)))?;
            p.tensor = src.clone();
        }
        Ok(twin)
    }

    /// Add low-rank adapters to the named projections of every layer and
    /// freeze all base weights. Connection projections stay trainable.
    pub fn attach_lora(&mut self, rank: usize, targets: &[Target]) -> Result<Vec<AdapterHandle>> {
        if rank == 0 {
            return Err(Error::param("LoRA rank must be at least 1"));
        }
        if self.lora.is_some() {
            return Err(Error::State("LoRA adapters are already attached".into()));
        }
        let mut targets = targets.to_vec();
        targets.sort_unstable();
        targets.dedup();
        if targets.is_empty() {
            return Err(Error::param("LoRA needs at least one target"));
        }
        let down_ids: Vec<ParamId> = self.down.iter().flat_map(|p| [p.a, p.bias_a, p.b, p.bias_b]).collect();
        let ids: Vec<ParamId> = self.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !down_ids.contains(&id) {
                self.params.set_trainable(id, false);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x10ba);
        let mut handles = Vec::new();
        for l in 0..self.config.n_layers {
            for &t in &targets {
                let (i, o) = target_dims(&self.config, t);
                let a = Tensor::randn([i, rank], 1.0 / (i as f32).sqrt(), &mut rng);
                let a = self.params.add(format!("layers.{l}.{t}.lora_a"), a, true)?;
                let b = self
                    .params
                    .add(format!("layers.{l}.{t}.lora_b"), Tensor::zeros([rank, o]), true)?;
                self.layers[l].lora[t.slot()] = Some((a, b));
                handles.push(AdapterHandle {
                    layer: l,
                    target: t,
                    a,
                    b,
                });
            }
        }
        self.lora = Some(LoraConfig { rank, targets });
        Ok(handles)
    }

    /// Attach adapters by target name (`q`, `k_proj`, `gate`, ...).
    pub fn attach_lora_named(&mut self, rank: usize, names: &[&str]) -> Result<Vec<AdapterHandle>> {
        let targets = names.iter().map(|n| n.parse()).collect::<Result<Vec<Target>>>()?;
        self.attach_lora(rank, &targets)
    }

    pub fn trainable_params(&self) -> usize {
        self.params.trainable_count()
    }
}

pub(crate) fn check_lambda(lambda: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!(
            "soft-token lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}
