//! Two-stage optimization: contrastive retriever training, then joint
//! verification and explanation training against frozen retrieval.

mod adam;
mod checkpoint;
mod config;
mod model;

pub use adam::{Adam, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, EpochLog, Stage, CHECKPOINT_VERSION,
};
pub use config::{parse_ablations, Ablation, EvidenceSetting, ExplanationMode, TrainConfig};
pub use model::{
    build_vocabulary, evidence_for, explanation_enabled, ClaimLoss, JointModel, Prediction, RetrieverModel,
};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::evalkit::{f1_scores, mean_average_precision, F1Scores, GoldSets, Rankings};
use crate::nn::{scalar, ParamStore, ParamTensor};
use crate::retriever::RankedList;

/// Offset between the stage-1 and stage-2 seeds.
const JOINT_SEED_OFFSET: u64 = 0x9E37_79B9;

/// Applies dataset-level ablations.
pub fn effective_dataset(d: &Dataset, config: &TrainConfig) -> Dataset {
    if config.has(Ablation::NoImages) {
        d.without_images()
    } else {
        d.clone()
    }
}

/// `val` when it has claims, else `train`.
pub fn eval_split(d: &Dataset) -> &'static str {
    if d.split_ids("val").is_empty() {
        "train"
    } else {
        "val"
    }
}

/// Optimizer state, history and early-stopping bookkeeping.
#[derive(Debug, Clone)]
struct Progress {
    epoch: usize,
    rng: ChaCha8Rng,
    adam: Adam,
    history: Vec<EpochLog>,
    best_metric: Option<f64>,
    best_epoch: usize,
    best_params: Vec<ParamTensor>,
    stale: usize,
    finished: bool,
}

impl Progress {
    fn new(store: &ParamStore, lr: f64, rng: ChaCha8Rng) -> Self {
        Self {
            epoch: 0,
            rng,
            adam: Adam::new(store, lr),
            history: Vec::new(),
            best_metric: None,
            best_epoch: 0,
            best_params: Vec::new(),
            stale: 0,
            finished: false,
        }
    }

    fn record(&mut self, log: EpochLog, store: &ParamStore, patience: usize) -> Result<()> {
        self.epoch = log.epoch;
        if self.best_metric.is_none_or(|b| log.metric > b) {
            self.best_metric = Some(log.metric);
            self.best_epoch = log.epoch;
            self.best_params = store.snapshot()?;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.history.push(log);
        if (patience > 0 && self.stale >= patience) || self.best_metric >= Some(1.0) {
            self.finished = true;
        }
        Ok(())
    }

    fn moments(&self, store: &ParamStore, which: &[Vec<f64>]) -> Vec<ParamTensor> {
        store
            .iter()
            .zip(which)
            .map(|(p, data)| ParamTensor {
                name: p.name.clone(),
                shape: p.var.dims().to_vec(),
                data: data.clone(),
            })
            .collect()
    }

    fn checkpoint(&self, stage: Stage, model: ModelMeta<'_>, frozen: Vec<ParamTensor>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: CheckpointMeta {
                stage,
                config: model.config.clone(),
                vocab: model.vocab.clone(),
                label_set: model.label_set.to_vec(),
                explain: model.explain,
                epoch: self.epoch,
                rng: self.rng.clone(),
                history: self.history.clone(),
                best_metric: self.best_metric,
                best_epoch: self.best_epoch,
                stale: self.stale,
                finished: self.finished,
                adam_t: self.adam.state.t,
            },
            params: model.store.snapshot()?,
            best_params: self.best_params.clone(),
            adam_m: self.moments(model.store, &self.adam.state.m),
            adam_v: self.moments(model.store, &self.adam.state.v),
            frozen,
        })
    }

    fn resume(ckpt: &Checkpoint, store: &ParamStore) -> Result<Self> {
        store.restore(&ckpt.params)?;
        let strip = |ts: &[ParamTensor]| -> Result<Vec<Vec<f64>>> {
            if ts.len() != store.len() {
                return Err(Error::CorruptFile("optimizer state does not match parameters".into()));
            }
            Ok(ts.iter().map(|t| t.data.clone()).collect())
        };
        let meta = &ckpt.meta;
        Ok(Self {
            epoch: meta.epoch,
            rng: meta.rng.clone(),
            adam: Adam {
                lr: meta.config.learning_rate,
                state: AdamState {
                    t: meta.adam_t,
                    m: strip(&ckpt.adam_m)?,
                    v: strip(&ckpt.adam_v)?,
                },
            },
            history: meta.history.clone(),
            best_metric: meta.best_metric,
            best_epoch: meta.best_epoch,
            best_params: ckpt.best_params.clone(),
            stale: meta.stale,
            finished: meta.finished,
        })
    }
}

struct ModelMeta<'a> {
    config: &'a TrainConfig,
    vocab: &'a crate::tokenizer::Vocabulary,
    label_set: &'a [String],
    explain: bool,
    store: &'a ParamStore,
}

/// Shuffled batches of at most `size`; a trailing singleton joins the
/// previous batch so every contrastive batch has at least two pairs.
fn shuffled_batches<T: Clone>(items: &[T], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut items = items.to_vec();
    items.shuffle(rng);
    let mut batches: Vec<Vec<T>> = items.chunks(size).map(<[T]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

fn step(adam: &mut Adam, store: &ParamStore, loss: &candle_core::Tensor, epoch: usize) -> Result<f64> {
    let value = scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::Diverged { epoch });
    }
    let grads = loss.backward()?;
    adam.step(store, &grads)?;
    Ok(value)
}

/// Gold sets of the claims in `ids` that have gold evidence.
pub fn gold_sets(d: &Dataset, ids: &[String]) -> GoldSets {
    let lookup = d.index();
    ids.iter()
        .filter_map(|id| lookup.claim(id))
        .filter(|c| !c.gold_evidence_ids.is_empty())
        .map(|c| (c.id.clone(), c.gold_evidence_ids.iter().cloned().collect::<BTreeSet<_>>()))
        .collect()
}

/// Builds the evidence index once and retrieves the top `k` for every claim.
pub fn freeze_and_retrieve(d: &Dataset, retriever: &RetrieverModel, k: usize) -> Result<BTreeMap<String, RankedList>> {
    let index = retriever.build_index(d)?;
    let lookup = d.index();
    d.claims
        .iter()
        .map(|c| Ok((c.id.clone(), retriever.retrieve(&lookup, c, &index, k)?)))
        .collect()
}

/// Full rankings for the gold-bearing claims of a split.
pub fn rank_split(d: &Dataset, retriever: &RetrieverModel, split: &str, k: usize) -> Result<(Rankings, GoldSets)> {
    let gold = gold_sets(d, &d.split_ids(split));
    let index = retriever.build_index(d)?;
    let lookup = d.index();
    let mut rankings = Rankings::new();
    for id in gold.keys() {
        let claim = lookup.claim(id).ok_or_else(|| Error::DanglingReference(id.clone()))?;
        rankings.insert(id.clone(), retriever.retrieve(&lookup, claim, &index, k)?.ids());
    }
    Ok((rankings, gold))
}

/// MAP over the full ranking of a split.
pub fn retrieval_map(d: &Dataset, retriever: &RetrieverModel, split: &str) -> Result<f64> {
    let (rankings, gold) = rank_split(d, retriever, split, d.evidence.len().max(1))?;
    mean_average_precision(&rankings, &gold)
}

pub struct RetrieverTrainer {
    pub dataset: Dataset,
    pub model: RetrieverModel,
    config: TrainConfig,
    pairs: Vec<(String, String)>,
    progress: Progress,
}

impl RetrieverTrainer {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = effective_dataset(dataset, config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = build_vocabulary(&dataset, config.vocab_cap);
        let model = RetrieverModel::new(config, vocab, &mut rng)?;
        let progress = Progress::new(&model.store, config.learning_rate, rng);
        Self::assemble(dataset, model, config.clone(), progress)
    }

    pub fn from_checkpoint(dataset: &Dataset, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.stage != Stage::Retriever {
            return Err(Error::InvalidConfig("checkpoint is not a retriever checkpoint".into()));
        }
        let config = ckpt.meta.config.clone();
        let dataset = effective_dataset(dataset, &config);
        let model = retriever_from(&config, &ckpt.meta.vocab, &ckpt.params)?;
        let progress = Progress::resume(ckpt, &model.store)?;
        Self::assemble(dataset, model, config, progress)
    }

    fn assemble(dataset: Dataset, model: RetrieverModel, config: TrainConfig, progress: Progress) -> Result<Self> {
        let lookup = dataset.index();
        let pairs: Vec<(String, String)> = dataset
            .split_ids("train")
            .into_iter()
            .filter_map(|id| lookup.claim(&id))
            .filter_map(|c| c.gold_evidence_ids.first().map(|e| (c.id.clone(), e.clone())))
            .collect();
        if pairs.len() < 2 {
            return Err(Error::BatchTooSmall(pairs.len()));
        }
        Ok(Self {
            dataset,
            model,
            config,
            pairs,
            progress,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.progress.history
    }

    pub fn epoch(&self) -> usize {
        self.progress.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.progress.finished || self.progress.epoch >= self.config.max_epochs
    }

    /// One pass of shuffled in-batch contrastive updates.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.progress.epoch + 1;
        let batches = shuffled_batches(&self.pairs, self.config.batch_size, &mut self.progress.rng);
        let lookup = self.dataset.index();
        let mut total = 0.0;
        for batch in &batches {
            let pairs = batch
                .iter()
                .map(|(c, e)| {
                    let claim = lookup.claim(c).ok_or_else(|| Error::DanglingReference(c.clone()))?;
                    Ok((claim, e.as_str()))
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = self.model.batch_loss(&lookup, &pairs)?;
            total += step(&mut self.progress.adam, &self.model.store, &loss, epoch)?;
        }
        let metric = retrieval_map(&self.dataset, &self.model, eval_split(&self.dataset))?;
        let log = EpochLog {
            epoch,
            loss: total / batches.len() as f64,
            metric,
            verification: None,
            generation: None,
            regularizer: None,
        };
        self.progress
            .record(log.clone(), &self.model.store, self.config.patience)?;
        Ok(log)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            config: &self.config,
            vocab: &self.model.vocab,
            label_set: &self.dataset.label_set,
            explain: false,
            store: &self.model.store,
        };
        self.progress.checkpoint(Stage::Retriever, meta, Vec::new())
    }

    /// The model with its best-metric parameters restored.
    pub fn into_best(self) -> Result<RetrieverModel> {
        if !self.progress.best_params.is_empty() {
            self.model.store.restore(&self.progress.best_params)?;
        }
        Ok(self.model)
    }
}

fn retriever_from(config: &TrainConfig, vocab: &crate::tokenizer::Vocabulary, params: &[ParamTensor]) -> Result<RetrieverModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = RetrieverModel::new(config, vocab.clone(), &mut rng)?;
    model.store.restore(params)?;
    Ok(model)
}

fn best_or_current(ckpt: &Checkpoint) -> &[ParamTensor] {
    if ckpt.best_params.is_empty() {
        &ckpt.params
    } else {
        &ckpt.best_params
    }
}

/// Stage 1 to completion; returns the best model and the epoch log.
pub fn train_retriever(d: &Dataset, config: &TrainConfig) -> Result<(RetrieverModel, Vec<EpochLog>)> {
    let mut t = RetrieverTrainer::new(d, config)?;
    t.run()?;
    let history = t.history().to_vec();
    Ok((t.into_best()?, history))
}

/// Best retriever stored in a stage-1 or stage-2 checkpoint.
pub fn load_retriever(ckpt: &Checkpoint) -> Result<RetrieverModel> {
    match ckpt.meta.stage {
        Stage::Retriever => retriever_from(&ckpt.meta.config, &ckpt.meta.vocab, best_or_current(ckpt)),
        Stage::Joint => retriever_from(&ckpt.meta.config, &ckpt.meta.vocab, &ckpt.frozen),
    }
}

/// Frozen retriever and best joint model from a stage-2 checkpoint.
pub fn load_joint(ckpt: &Checkpoint) -> Result<(RetrieverModel, JointModel)> {
    if ckpt.meta.stage != Stage::Joint {
        return Err(Error::InvalidConfig("checkpoint is not a joint checkpoint".into()));
    }
    let meta = &ckpt.meta;
    let retriever = load_retriever(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(meta.config.seed.wrapping_add(JOINT_SEED_OFFSET));
    let model = JointModel::new(&meta.config, meta.vocab.clone(), meta.label_set.clone(), meta.explain, &mut rng)?;
    model.store.restore(best_or_current(ckpt))?;
    Ok((retriever, model))
}

/// Verdicts for the claims in `ids`, in order.
pub fn predict_labels(
    d: &Dataset,
    model: &JointModel,
    retrieved: &BTreeMap<String, RankedList>,
    ids: &[String],
) -> Result<Vec<String>> {
    let lookup = d.index();
    ids.iter()
        .map(|id| {
            let claim = lookup.claim(id).ok_or_else(|| Error::DanglingReference(id.clone()))?;
            let ev = evidence_for(&model.config, claim, retrieved)?;
            Ok(model
                .predict(&lookup, claim, &ev, false)?
                .distribution
                .predicted_label()
                .to_string())
        })
        .collect()
}

/// Micro/Macro F1 of the model on a split.
pub fn verification_scores(
    d: &Dataset,
    model: &JointModel,
    retrieved: &BTreeMap<String, RankedList>,
    split: &str,
) -> Result<F1Scores> {
    let ids = d.split_ids(split);
    let preds = predict_labels(d, model, retrieved, &ids)?;
    let lookup = d.index();
    let golds: Vec<String> = ids
        .iter()
        .map(|id| lookup.claim(id).map(|c| c.label.clone()).ok_or_else(|| Error::DanglingReference(id.clone())))
        .collect::<Result<_>>()?;
    f1_scores(&preds, &golds, &d.label_set)
}

pub struct JointTrainer {
    pub dataset: Dataset,
    pub retriever: RetrieverModel,
    pub retrieved: BTreeMap<String, RankedList>,
    pub model: JointModel,
    config: TrainConfig,
    train_ids: Vec<String>,
    progress: Progress,
}

impl JointTrainer {
    /// Freezes `retriever`, retrieves evidence for every claim and
    /// initializes the verification encoder from it.
    pub fn new(dataset: &Dataset, retriever: RetrieverModel, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = effective_dataset(dataset, config);
        let explain = explanation_enabled(config, &dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(JOINT_SEED_OFFSET));
        let model = JointModel::new(config, retriever.vocab.clone(), dataset.label_set.clone(), explain, &mut rng)?;
        model.init_from_retriever(&retriever)?;
        let progress = Progress::new(&model.store, config.learning_rate, rng);
        Self::assemble(dataset, retriever, model, config.clone(), progress)
    }

    pub fn from_checkpoint(dataset: &Dataset, ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        if meta.stage != Stage::Joint {
            return Err(Error::InvalidConfig("checkpoint is not a joint checkpoint".into()));
        }
        let config = meta.config.clone();
        let dataset = effective_dataset(dataset, &config);
        let retriever = retriever_from(&config, &meta.vocab, &ckpt.frozen)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(JOINT_SEED_OFFSET));
        let model = JointModel::new(&config, meta.vocab.clone(), meta.label_set.clone(), meta.explain, &mut rng)?;
        let progress = Progress::resume(ckpt, &model.store)?;
        Self::assemble(dataset, retriever, model, config, progress)
    }

    fn assemble(
        dataset: Dataset,
        retriever: RetrieverModel,
        model: JointModel,
        config: TrainConfig,
        progress: Progress,
    ) -> Result<Self> {
        let retrieved = freeze_and_retrieve(&dataset, &retriever, config.k_retrieved)?;
        let train_ids = dataset.split_ids("train");
        if train_ids.is_empty() {
            return Err(Error::TooFewClaims(0));
        }
        Ok(Self {
            dataset,
            retriever,
            retrieved,
            model,
            config,
            train_ids,
            progress,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.progress.history
    }

    pub fn epoch(&self) -> usize {
        self.progress.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.progress.finished || self.progress.epoch >= self.config.joint_max_epochs
    }

    /// Per-claim loss terms for a batch of claim ids.
    pub fn claim_losses(&self, ids: &[String]) -> Result<Vec<ClaimLoss>> {
        let lookup = self.dataset.index();
        ids.iter()
            .map(|id| {
                let claim = lookup.claim(id).ok_or_else(|| Error::DanglingReference(id.clone()))?;
                let ev = evidence_for(&self.config, claim, &self.retrieved)?;
                self.model.claim_loss(&lookup, claim, &ev)
            })
            .collect()
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.progress.epoch + 1;
        let lambda = self.config.effective_lambda();
        let batches = shuffled_batches(&self.train_ids, self.config.batch_size, &mut self.progress.rng);
        let (mut total, mut ver, mut gen, mut reg) = (0.0, 0.0, 0.0, 0.0);
        let (mut any_gen, mut any_reg) = (false, false);
        for batch in &batches {
            let losses = self.claim_losses(batch)?;
            let mut sum: Option<candle_core::Tensor> = None;
            for l in &losses {
                ver += scalar(&l.verification)?;
                if let Some(g) = &l.generation {
                    gen += scalar(g)?;
                    any_gen = true;
                }
                if let Some(r) = &l.regularizer {
                    reg += scalar(r)?;
                    any_reg = true;
                }
                let t = l.total(lambda)?;
                sum = Some(match sum {
                    Some(s) => (s + t)?,
                    None => t,
                });
            }
            let mean = (sum.expect("nonempty batch") / losses.len() as f64)?;
            total += step(&mut self.progress.adam, &self.model.store, &mean, epoch)? * losses.len() as f64;
        }
        let n = self.train_ids.len() as f64;
        let metric = verification_scores(&self.dataset, &self.model, &self.retrieved, eval_split(&self.dataset))?.macro_f1;
        let log = EpochLog {
            epoch,
            loss: total / n,
            metric,
            verification: Some(ver / n),
            generation: any_gen.then_some(gen / n),
            regularizer: any_reg.then_some(reg / n),
        };
        self.progress
            .record(log.clone(), &self.model.store, self.config.patience)?;
        Ok(log)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            config: &self.config,
            vocab: &self.model.vocab,
            label_set: &self.model.label_set,
            explain: self.model.explain,
            store: &self.model.store,
        };
        self.progress
            .checkpoint(Stage::Joint, meta, self.retriever.store.snapshot()?)
    }

    pub fn into_best(self) -> Result<(RetrieverModel, JointModel, BTreeMap<String, RankedList>)> {
        if !self.progress.best_params.is_empty() {
            self.model.store.restore(&self.progress.best_params)?;
        }
        Ok((self.retriever, self.model, self.retrieved))
    }
}

/// Stage 2 to completion.
pub fn train_joint(
    d: &Dataset,
    retriever: RetrieverModel,
    config: &TrainConfig,
) -> Result<(JointModel, Vec<EpochLog>)> {
    let mut t = JointTrainer::new(d, retriever, config)?;
    t.run()?;
    let history = t.history().to_vec();
    let (_, model, _) = t.into_best()?;
    Ok((model, history))
}
