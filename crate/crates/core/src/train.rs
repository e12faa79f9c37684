//! Pretraining, adaptation, ablation and evaluation workflows.
//!
//! # Run configuration
//!
//! A [`RunConfig`] is read from a TOML file; every key is optional and falls
//! back to [`RunConfig::default`]:
//!
//! ```toml
//! seed = 0
//! method = "svd"            # frozen | bias_only | lora<r> | svd | full
//! adapt_attn_proj = true
//! train_adapter_bias = false
//! out_dir = "runs/svd"
//! pretrained = "runs/pretrain/checkpoint.safetensors"
//!
//! [toggles]                 # only valid with method = "svd"
//! pos_embed = true
//! layernorm = true
//! tal = true
//! scale = true
//! shift = true
//!
//! [model]                   # see ModelConfig
//! image_size = 64
//!
//! [pretrain]                # optimizer for pretraining
//! lr = 1e-3
//! steps = 2500
//! batch_size = 8
//! warmup_steps = 100
//!
//! [adapt]                   # optimizer for adaptation
//! lr = 1e-3
//! steps = 500
//! batch_size = 8
//!
//! [loss]
//! bce_weight = 1.0
//! dice_weight = 1.0
//! absent_fraction = 0.25    # share of absent-class prompts per batch
//!
//! [data]
//! train_images = 400
//! eval_images = 100
//! image_size = 64           # target-domain image size
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use candle_core::{Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::data::{generate, images_to_tensor, ingest, masks_to_tensor, Dataset, Image, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, DiceResult, EvalProtocol, ModelSegmenter};
use crate::model::{init_params, ComponentToggles, ModelConfig, PromptSegModel, SsamOptions};
use crate::params::{Checkpoint, ParamStore};
use crate::peft::{make_baseline, BaselineOptions, Method, ParamReport};
use crate::seed::substream;
use crate::text::{TextEmbedder, TextEncoder, DEFAULT_TEXT_SEED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Linear warmup before the cosine decay.
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::adapt()
    }
}

impl OptimConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-3,
            steps: 2500,
            batch_size: 8,
            warmup_steps: 100,
        }
    }

    pub fn adapt() -> Self {
        Self {
            lr: 1e-3,
            steps: 500,
            batch_size: 8,
            warmup_steps: 0,
        }
    }

    /// Learning rate at `step`: linear warmup, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let t = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub absent_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bce_weight: 1.0,
            dice_weight: 1.0,
            absent_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub eval_images: usize,
    /// Image size of the adaptation domain; the positional grid is pooled to
    /// match.
    pub image_size: usize,
    /// Ingest the training set from disk instead of generating it.
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 400,
            eval_images: 100,
            image_size: ModelConfig::desk().image_size,
            train_dir: None,
            eval_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub toggles: Option<ComponentToggles>,
    pub adapt_attn_proj: bool,
    pub train_adapter_bias: bool,
    pub text_seed: u64,
    pub eval_batch_size: usize,
    pub out_dir: PathBuf,
    pub pretrained: Option<PathBuf>,
    pub model: ModelConfig,
    pub pretrain: OptimConfig,
    pub adapt: OptimConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Svd,
            toggles: None,
            adapt_attn_proj: true,
            train_adapter_bias: false,
            text_seed: DEFAULT_TEXT_SEED,
            eval_batch_size: 32,
            out_dir: PathBuf::from("runs"),
            pretrained: None,
            model: ModelConfig::desk(),
            pretrain: OptimConfig::pretrain(),
            adapt: OptimConfig::adapt(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.toggles.is_some() && !self.method.is_svd() {
            return Err(Error::Config(format!(
                "component toggles only apply to method `svd`, not `{}`",
                self.method
            )));
        }
        for (name, o) in [("pretrain", &self.pretrain), ("adapt", &self.adapt)] {
            if o.batch_size == 0 || !(o.lr.is_finite() && o.lr > 0.0) {
                return Err(Error::Config(format!("{name}: batch_size and lr must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.loss.absent_fraction) {
            return Err(Error::Config("loss.absent_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn toggles(&self) -> ComponentToggles {
        self.toggles.unwrap_or_default()
    }

    pub fn ssam_options(&self) -> SsamOptions {
        SsamOptions {
            toggles: self.toggles(),
            adapt_attn_proj: self.adapt_attn_proj,
            train_adapter_bias: self.train_adapter_bias,
        }
    }

    fn data_seed(&self, split: &str) -> u64 {
        substream(substream(self.seed, "data"), split)
    }

    /// Source-domain training and evaluation sets at the model resolution.
    pub fn source_data(&self) -> Result<(Dataset, Dataset)> {
        let spec = SynthSpec::source(self.model.image_size);
        Ok((
            generate(&spec, self.data.train_images, self.data_seed("train"))?,
            generate(&spec, self.data.eval_images, self.data_seed("eval"))?,
        ))
    }

    /// Target-domain training and evaluation sets, from disk if configured.
    pub fn target_data(&self) -> Result<(Dataset, Dataset)> {
        let spec = SynthSpec::target(self.data.image_size);
        let train = match &self.data.train_dir {
            Some(dir) => ingest(dir)?,
            None => generate(&spec, self.data.train_images, self.data_seed("train"))?,
        };
        let eval = match &self.data.eval_dir {
            Some(dir) => ingest(dir)?,
            None => generate(&spec, self.data.eval_images, self.data_seed("eval"))?,
        };
        Ok((train, eval))
    }

    pub fn text_encoder(&self, dataset: &Dataset) -> TextEmbedder {
        let labels: Vec<&str> = dataset.labels.names().collect();
        TextEmbedder::new(self.model.prompt_dim, self.text_seed, &labels)
    }
}

/// Numerically stable mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let l = ((logits.relu()? - (logits * target)?)? + softplus)?;
    Ok(l.mean_all()?)
}

/// `1 − (2Σpg + 1) / (Σp + Σg + 1)` per sample, averaged over the batch.
/// A blank target is scored by how little foreground is predicted.
pub fn soft_dice_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = ((logits * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?;
    let p = p.flatten_from(1)?;
    let g = target.flatten_from(1)?;
    let inter = (&p * &g)?.sum(D::Minus1)?;
    let denom = ((p.sum(D::Minus1)? + g.sum(D::Minus1)?)? + 1.0)?;
    let score = ((inter * 2.0)? + 1.0)?.div(&denom)?;
    Ok(score.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

pub fn segmentation_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let bce = bce_with_logits(logits, target)?;
    let dice = soft_dice_loss(logits, target)?;
    Ok(((bce * cfg.bce_weight)? + (dice * cfg.dice_weight)?)?)
}

/// Draws batches mixing present-class and absent-class queries at a fixed
/// ratio, cycling through shuffled epochs of each pool.
struct BatchSampler {
    pools: [Vec<usize>; 2],
    cursors: [usize; 2],
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(dataset: &Dataset, seed: u64) -> Result<Self> {
        let (present, absent): (Vec<usize>, Vec<usize>) =
            (0..dataset.samples.len()).partition(|&i| !dataset.samples[i].mask.is_blank());
        if present.is_empty() {
            return Err(Error::InsufficientData("training set has no foreground queries".into()));
        }
        let mut s = Self {
            pools: [present, absent],
            cursors: [0, 0],
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        for p in 0..2 {
            let pool = &mut s.pools[p];
            pool.shuffle(&mut s.rng);
        }
        Ok(s)
    }

    fn draw(&mut self, pool: usize) -> usize {
        if self.cursors[pool] == self.pools[pool].len() {
            let p = &mut self.pools[pool];
            p.shuffle(&mut self.rng);
            self.cursors[pool] = 0;
        }
        self.cursors[pool] += 1;
        self.pools[pool][self.cursors[pool] - 1]
    }

    fn next(&mut self, batch: usize, absent_fraction: f64) -> Vec<usize> {
        let n_absent = if self.pools[1].is_empty() {
            0
        } else {
            (batch as f64 * absent_fraction).round() as usize
        };
        let mut out: Vec<usize> = (0..batch - n_absent).map(|_| self.draw(0)).collect();
        out.extend((0..n_absent).map(|_| self.draw(1)));
        out
    }
}

/// Optimize the trainable arrays of `store` on `dataset`. Returns the loss
/// of every step.
pub fn train_loop(
    store: &ParamStore,
    config: &ModelConfig,
    dataset: &Dataset,
    text: &dyn TextEncoder,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
    shuffle_seed: u64,
) -> Result<Vec<f32>> {
    let vars = store.trainable_vars();
    if vars.is_empty() || optim.steps == 0 {
        return Ok(Vec::new());
    }
    let device = store.device().clone();
    let model = PromptSegModel::from_store(store, config)?;
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: optim.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut prompts: HashMap<&str, Vec<f32>> = HashMap::new();
    for name in dataset.labels.names() {
        prompts.insert(name, text.embed(name)?);
    }
    let mut sampler = BatchSampler::new(dataset, shuffle_seed)?;
    let mut losses = Vec::with_capacity(optim.steps);
    for step in 0..optim.steps {
        let idx = sampler.next(optim.batch_size, loss_cfg.absent_fraction);
        let samples: Vec<_> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let images: Vec<&Image> = samples.iter().map(|s| s.image.as_ref()).collect();
        let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
        let mut emb = Vec::with_capacity(samples.len() * text.dim());
        for s in &samples {
            let e = prompts
                .get(s.prompt.as_str())
                .ok_or_else(|| Error::UnknownLabels(vec![s.prompt.clone()]))?;
            emb.extend_from_slice(e);
        }
        let x = images_to_tensor(&images, &device)?;
        let y = masks_to_tensor(&masks, &device)?;
        let e = Tensor::from_vec(emb, (samples.len(), text.dim()), &device)?;

        let logits = model.predict_mask(&x, &e)?;
        let loss = segmentation_loss(&logits, &y, loss_cfg)?;
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::Training { step, loss: value });
        }
        opt.set_learning_rate(optim.lr_at(step));
        opt.backward_step(&loss)?;
        losses.push(value);
        if step % 50 == 0 || step + 1 == optim.steps {
            debug!(step, loss = value, "train");
        }
    }
    Ok(losses)
}

pub fn evaluate_model(
    model: &PromptSegModel,
    dataset: &Dataset,
    text: &dyn TextEncoder,
    batch_size: usize,
    protocol: EvalProtocol,
) -> Result<DiceResult> {
    let seg = ModelSegmenter {
        model,
        text,
        batch_size,
    };
    evaluate(&seg, dataset, protocol)
}

pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    text: &dyn TextEncoder,
    batch_size: usize,
    protocol: EvalProtocol,
) -> Result<DiceResult> {
    let model = PromptSegModel::from_store(&ckpt.store, &ckpt.config)?;
    evaluate_model(&model, dataset, text, batch_size, protocol)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f32>,
    pub source_eval: DiceResult,
}

/// Train every parameter of a freshly initialized model on the source
/// domain. The returned checkpoint has all arrays frozen.
pub fn pretrain(config: &RunConfig, device: &Device) -> Result<PretrainOutcome> {
    config.validate()?;
    let mut store = init_params(&config.model, substream(config.seed, "init"), device)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        store.set_trainable(n, true)?;
    }
    let (train, eval) = config.source_data()?;
    let text = config.text_encoder(&train);
    info!(steps = config.pretrain.steps, params = store.total_count(), "pretraining");
    let losses = train_loop(
        &store,
        &config.model,
        &train,
        &text,
        &config.pretrain,
        &config.loss,
        substream(config.seed, "shuffle"),
    )?;
    store.freeze_all()?;
    let checkpoint = Checkpoint {
        config: config.model.clone(),
        store,
        method: None,
    };
    let source_eval = evaluate_checkpoint(
        &checkpoint,
        &eval,
        &text,
        config.eval_batch_size,
        EvalProtocol::AllLabels,
    )?;
    info!(dsc = source_eval.average, "source-domain evaluation");
    Ok(PretrainOutcome {
        checkpoint,
        losses,
        source_eval,
    })
}

/// Result of comparing the frozen arrays of an adapted store against what
/// they must equal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrozenAudit {
    pub checked: usize,
    /// Frozen arrays also present in the pretrained checkpoint under the same
    /// name and shape.
    pub shared_with_pretrained: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
}

impl FrozenAudit {
    pub fn passed(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty()
    }
}

/// The method-specific store an adaptation run starts from.
pub fn initial_store(
    pretrained: &Checkpoint,
    config: &RunConfig,
) -> Result<(ParamStore, ModelConfig, Method)> {
    // Singular-value tuning with nothing trainable is a no-op: the frozen
    // model is used as is, without a reconstruction round trip.
    let effective = if config.method.is_svd() && !config.toggles().any() {
        Method::Frozen
    } else {
        config.method
    };
    let opts = BaselineOptions {
        target_image_size: config.data.image_size,
        ssam: config.ssam_options(),
        seed: substream(config.seed, "init"),
    };
    let (store, model) = make_baseline(&pretrained.store, &pretrained.config, &effective, &opts)?;
    Ok((store, model, effective))
}

/// Check that every frozen array of `adapted` is bitwise equal to the same
/// array in `reference` (the freshly rewired pretrained store), and to the
/// pretrained array of the same name and shape where one exists.
pub fn audit_frozen(
    pretrained: &ParamStore,
    reference: &BTreeMap<String, Vec<u32>>,
    adapted: &ParamStore,
) -> Result<FrozenAudit> {
    let mut audit = FrozenAudit::default();
    for (name, t, _, trainable) in adapted.iter() {
        if trainable {
            continue;
        }
        audit.checked += 1;
        let bits = crate::params::tensor_bits(&t)?;
        match reference.get(name) {
            Some(r) if *r == bits => {}
            Some(_) => audit.mismatched.push(name.to_string()),
            None => audit.missing.push(name.to_string()),
        }
        if let Some(p) = pretrained.get_opt(name) {
            if p.dims() == t.dims() {
                audit.shared_with_pretrained += 1;
                if crate::params::tensor_bits(&p)? != bits && !audit.mismatched.iter().any(|m| m == name) {
                    audit.mismatched.push(name.to_string());
                }
            }
        }
    }
    for name in reference.keys() {
        if !adapted.contains(name) {
            audit.missing.push(name.clone());
        }
    }
    Ok(audit)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    pub report: ParamReport,
    pub losses: Vec<f32>,
    pub eval: DiceResult,
    pub audit: FrozenAudit,
}

/// Rewire `pretrained` for the configured method, train on the target
/// domain, audit the frozen arrays and evaluate.
pub fn adapt(config: &RunConfig, pretrained: &Checkpoint) -> Result<AdaptOutcome> {
    config.validate()?;
    let (store, model_config, effective) = initial_store(pretrained, config)?;
    let reference = store.snapshot_bits()?;
    let (train, eval) = config.target_data()?;
    let text = config.text_encoder(&train);
    info!(
        method = %config.method,
        trainable = store.trainable_count(),
        steps = config.adapt.steps,
        "adapting"
    );
    let losses = train_loop(
        &store,
        &model_config,
        &train,
        &text,
        &config.adapt,
        &config.loss,
        substream(config.seed, "shuffle"),
    )?;
    let audit = audit_frozen(&pretrained.store, &reference, &store)?;
    if !audit.passed() {
        return Err(Error::FrozenChanged(format!(
            "mismatched {:?}, missing {:?}",
            audit.mismatched, audit.missing
        )));
    }
    let mut report = ParamReport::from_store(&effective, &store);
    report.method = config.method.to_string();
    let checkpoint = Checkpoint {
        config: model_config,
        store,
        method: Some(config.method.to_string()),
    };
    let eval = evaluate_checkpoint(
        &checkpoint,
        &eval,
        &text,
        config.eval_batch_size,
        EvalProtocol::AllLabels,
    )?;
    info!(method = %config.method, dsc = eval.average, "target-domain evaluation");
    Ok(AdaptOutcome {
        checkpoint,
        report,
        losses,
        eval,
        audit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: ComponentToggles,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub trainable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// The seven cumulative toggle combinations, in table order.
pub fn ablation_rows() -> Vec<(&'static str, ComponentToggles)> {
    let none = ComponentToggles::none();
    let pos = ComponentToggles {
        pos_embed: true,
        ..none
    };
    let ln = ComponentToggles {
        layernorm: true,
        ..pos
    };
    let tal = ComponentToggles { tal: true, ..ln };
    vec![
        ("none", none),
        ("+pos_embed", pos),
        ("+layernorm", ln),
        ("+tal", tal),
        ("+scale", ComponentToggles { scale: true, ..tal }),
        ("+shift", ComponentToggles { shift: true, ..tal }),
        ("+scale+shift", ComponentToggles::all()),
    ]
}

/// Run every ablation row for every seed with `method = svd`.
pub fn run_ablation(base: &RunConfig, pretrained: &Checkpoint, seeds: &[u64]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, toggles) in ablation_rows() {
        let mut per_seed = Vec::new();
        let mut trainable = 0;
        for &seed in seeds {
            let cfg = RunConfig {
                seed,
                method: Method::Svd,
                toggles: Some(toggles),
                ..base.clone()
            };
            let out = adapt(&cfg, pretrained)?;
            trainable = out.report.trainable;
            per_seed.push(out.eval.average);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        info!(row = label, mean, "ablation row");
        rows.push(AblationRow {
            label: label.to_string(),
            toggles,
            per_seed,
            mean,
            trainable,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let o = OptimConfig {
            lr: 1e-3,
            steps: 100,
            batch_size: 1,
            warmup_steps: 0,
        };
        assert_eq!(o.lr_at(0), 1e-3);
        assert!((o.lr_at(50) - 5e-4).abs() < 1e-12);
        assert!(o.lr_at(99) < 1e-5);
        let w = OptimConfig { warmup_steps: 10, ..o };
        assert!((w.lr_at(0) - 1e-4).abs() < 1e-12);
        assert_eq!(w.lr_at(10), 1e-3);
    }

    #[test]
    fn toggles_with_non_svd_method_are_rejected() {
        let cfg = RunConfig {
            method: Method::Lora(4),
            toggles: Some(ComponentToggles::all()),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RunConfig {
            method: Method::Lora(2),
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::from_toml("seed = 9\n[adapt]\nsteps = 5\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.adapt.steps, 5);
        assert_eq!(partial.adapt.lr, 1e-3);
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn ablation_rows_are_cumulative() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 7);
        assert!(!rows[0].1.any());
        assert_eq!(rows[6].1, ComponentToggles::all());
        assert!(rows[4].1.scale && !rows[4].1.shift);
        assert!(rows[5].1.shift && !rows[5].1.scale);
    }

    #[test]
    fn sampler_mixes_present_and_absent() {
        let d = generate(&SynthSpec::source(32), 10, 1).unwrap();
        let mut s = BatchSampler::new(&d, 3).unwrap();
        let idx = s.next(16, 0.25);
        let absent = idx.iter().filter(|&&i| d.samples[i].mask.is_blank()).count();
        assert_eq!(absent, 4);
    }
}
