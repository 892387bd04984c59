//! Stage orchestration over a working directory.
//!
//! Layout (relative to the workdir):
//!
//! ```text
//! suite.json                     program names and train/eval roles
//! workloads/<p>.toml, <p>.s      workload spec and generated listing
//! traces/<p>.trace               executed instruction trace
//! cpi/<model>.tsv                per-interval oracle CPI
//! blocks.txt                     block store
//! intervals.jsonl, bbv.jsonl     interval profiles and traditional BBVs
//! vocab.txt                      token vocabulary
//! models/encoder-pretrained.*    stage-1 weights after pre-training
//! models/encoder.*               stage-1 weights after fine-tuning
//! bbe.*                          one embedding per stored block
//! models/aggregator.*            stage-2 weights
//! models/aggregator-adapted.*    stage-2 weights fine-tuned for another cost model
//! signatures/semantic.*          interval signatures
//! clusters/<feature>.*           cluster model and representatives
//! reports/*.json, *.txt          evaluation outputs
//! manifests/<stage>.json         provenance of every stage
//! ```
//!
//! Each stage checks the recorded hashes of the upstream outputs it reads.

use crate::aggregator::{
    self, weight_bbes, Aggregator, AggregatorError, IntervalSample, ModelMeta, SignatureIndexEntry, SignatureSet, TrainConfig,
};
use crate::artifact::{self, hash_file, load_matrix, save_matrix, sha256_hex, ArtifactError, StageManifest, TOOL_VERSION};
use crate::asmnorm::{AsmError, SemanticTable, Vocabulary};
use crate::blockstore::{
    intervals_from_jsonl, intervals_to_jsonl, parse_trace, segment_trace, slice_intervals, traditional_bbv, BbvSpace, BlockError,
    BlockId, BlockStore, IntervalProfile, TraditionalBbv,
};
use crate::config::{ConfigError, RunConfig};
use crate::encoder::{
    self, finetune, load_weights, ntp_uniform_baseline, save_weights, sequence, BcsdCorpus, Encoder, EncoderError, Pretrainer,
};
use crate::estimator::{
    accuracy, bcsd_eval, cross_program_eval, intra_program_eval, random_mrr, BcsdResult, EstimationReport, EstimatorError,
    IntervalRecord,
};
use crate::oracle::{
    self, cpi_records_from_text, cpi_records_to_text, random_spec, CostModel, CostModelKind, CpiRecord, OracleError, WorkloadSpec,
};
use crate::phases::{self, kmeans_fit, normalize_rows, pick_representatives, silhouette, FeatureKind, KMeansConfig, PhasesError};
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Phases(#[from] PhasesError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("check failed: {0}")]
    Check(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub mod paths {
    pub const SUITE: &str = "suite.json";
    pub const BLOCKS: &str = "blocks.txt";
    pub const INTERVALS: &str = "intervals.jsonl";
    pub const BBVS: &str = "bbv.jsonl";
    pub const VOCAB: &str = "vocab.txt";
    pub const ENCODER_PRETRAINED: &str = "models/encoder-pretrained";
    pub const ENCODER: &str = "models/encoder";
    pub const BBE: &str = "bbe";
    pub const AGGREGATOR: &str = "models/aggregator";
    pub const AGGREGATOR_ADAPTED: &str = "models/aggregator-adapted";
    pub const SIGNATURES: &str = "signatures/semantic";

    pub fn workload(name: &str) -> String {
        format!("workloads/{name}.toml")
    }

    pub fn listing(name: &str) -> String {
        format!("workloads/{name}.s")
    }

    pub fn trace(name: &str) -> String {
        format!("traces/{name}.trace")
    }

    pub fn cpi(model: super::CostModelKind) -> String {
        format!("cpi/{}.tsv", model_name(model))
    }

    pub fn model_name(model: super::CostModelKind) -> &'static str {
        match model {
            super::CostModelKind::Simple => "simple",
            super::CostModelKind::Complex => "complex",
        }
    }

    /// `<stem>.json` and `<stem>.bin`.
    pub fn pair(stem: &str) -> [String; 2] {
        [format!("{stem}.json"), format!("{stem}.bin")]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub role: Role,
    pub instructions: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMode {
    Intra,
    Cross,
}

impl std::str::FromStr for EstimateMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "intra" => Ok(EstimateMode::Intra),
            "cross" => Ok(EstimateMode::Cross),
            other => Err(format!("unknown mode `{other}` (intra|cross)")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: usize,
    pub first: serde_json::Value,
    pub last: serde_json::Value,
    pub trace: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BcsdReport {
    pub finetuned: BcsdResult,
    pub pretrained_only: BcsdResult,
    pub random_baseline_mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptProgram {
    pub program_id: String,
    pub zero_shot_accuracy: f64,
    pub adapted_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub target_model: CostModelKind,
    pub tuning_programs: Vec<String>,
    pub tuning_intervals: usize,
    pub dataset_fraction: f64,
    pub held_out: Vec<AdaptProgram>,
    pub zero_shot_mean: f64,
    pub adapted_mean: f64,
    pub improvement_pp: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub encoder: crate::autograd::GradCheckReport,
    pub aggregator: crate::autograd::GradCheckReport,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterReport {
    pub feature_kind: FeatureKind,
    pub k: usize,
    pub points: usize,
    pub inertia: f64,
    pub silhouette: f64,
    pub sizes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BbeMeta {
    encoder_sha256: String,
    blocks: Vec<BlockId>,
}

#[derive(Serialize, Deserialize)]
struct BbvRecord {
    program_id: String,
    interval_index: usize,
    weights: Vec<(BlockId, f64)>,
}

/// Feature matrix for a set of intervals, with their records.
pub struct Features {
    pub points: Matrix,
    pub records: Vec<IntervalRecord>,
}

pub struct Pipeline {
    pub workdir: PathBuf,
    pub config: RunConfig,
}

/// Tracks the files a stage reads and writes.
struct Stage<'a> {
    pipeline: &'a Pipeline,
    name: String,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    extra: serde_json::Value,
}

impl<'a> Stage<'a> {
    /// Verifies `upstream`'s recorded outputs and records the ones in `files`.
    fn input(&mut self, upstream: &str, files: &[String]) -> Result<()> {
        let m = self.pipeline.require(upstream)?;
        for f in files {
            let h = m.outputs.get(f).ok_or_else(|| ArtifactError::Missing {
                path: self.pipeline.path(f),
                hint: format!("`{upstream}` did not record it; rerun `{upstream}`"),
            })?;
            self.inputs.insert(f.clone(), h.clone());
        }
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        artifact::write(&self.pipeline.path(rel), bytes)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        self.write(rel, artifact::to_json(v).as_bytes())
    }

    fn produced(&mut self, rels: impl IntoIterator<Item = String>) {
        self.outputs.extend(rels);
    }

    fn finish(self) -> Result<StageManifest> {
        let p = self.pipeline;
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            outputs.insert(rel.clone(), hash_file(&p.path(rel))?);
        }
        let mut config = serde_json::to_value(&p.config).expect("config serializes");
        if !self.extra.is_null() {
            config["stage_options"] = self.extra;
        }
        let m = StageManifest {
            stage: self.name.clone(),
            tool_version: TOOL_VERSION.into(),
            config_hash: p.config.hash(),
            seed: p.config.stage_seed(&self.name),
            inputs: self.inputs,
            outputs,
            fp_tolerance: 0.0,
            config,
            elapsed_secs: self.started.elapsed().as_secs_f64(),
        };
        m.save(&p.workdir)?;
        log::info!("{}: {} outputs in {:.1}s", m.stage, m.outputs.len(), m.elapsed_secs);
        Ok(m)
    }
}

fn json_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn cpi_map(records: &[CpiRecord]) -> HashMap<(String, usize), f64> {
    records.iter().map(|r| ((r.program.clone(), r.interval_index), r.cpi)).collect()
}

impl Pipeline {
    pub fn new(workdir: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { workdir: workdir.into(), config })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }

    fn stage(&self, name: &str) -> Stage<'_> {
        Stage {
            pipeline: self,
            name: name.to_string(),
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    /// Loads a stage manifest and re-hashes its outputs.
    pub fn require(&self, stage: &str) -> Result<StageManifest> {
        let m = StageManifest::load(&self.workdir, stage)?;
        m.verify_outputs(&self.workdir)?;
        Ok(m)
    }

    fn seed(&self, stage: &str) -> u64 {
        self.config.stage_seed(stage)
    }

    fn read_text(&self, rel: &str) -> Result<String> {
        Ok(artifact::read_text(&self.path(rel))?)
    }

    pub fn suite(&self) -> Result<Vec<SuiteEntry>> {
        let p = self.path(paths::SUITE);
        Ok(artifact::from_json(&p, &artifact::read_text(&p)?)?)
    }

    fn programs(&self, role: Role) -> Result<Vec<String>> {
        Ok(self.suite()?.into_iter().filter(|e| e.role == role).map(|e| e.name).collect())
    }

    fn bcsd_corpus(&self, split: &str) -> BcsdCorpus {
        let b = &self.config.bcsd;
        match split {
            "train" => BcsdCorpus::generate(b.train_functions, b.variants, self.seed("bcsd-train")),
            _ => BcsdCorpus::generate(b.eval_functions, 2, self.seed("bcsd-eval")),
        }
    }

    /// Workload specs for both roles.
    pub fn workload_specs(&self) -> Vec<(WorkloadSpec, Role)> {
        let w = &self.config.workloads;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed("gen"));
        let mut out = Vec::new();
        for (role, prefix, count) in [(Role::Train, "train", w.train_programs), (Role::Eval, "eval", w.eval_programs)] {
            for i in 0..count {
                let seed = rng.gen();
                out.push((random_spec(&format!("{prefix}-{i:02}"), seed, 3, 6, w.phase_unit, (w.min_units, w.max_units)), role));
            }
        }
        out
    }

    /// Generates workloads, executes them, and records traces and oracle CPI
    /// under both cost models.
    pub fn gen(&self) -> Result<Vec<SuiteEntry>> {
        let mut st = self.stage("gen");
        let specs = self.workload_specs();
        let len = self.config.interval_len;
        let runs = crate::par::try_map(&specs, |(spec, _)| {
            let run = oracle::run_workload(spec, spec.seed)?;
            let cpis: Vec<Vec<f64>> =
                [CostModelKind::Simple, CostModelKind::Complex].iter().map(|&k| run.interval_cpi(&CostModel::of(k), len)).collect();
            Ok::<_, OracleError>((oracle::gen_program(spec)?, run.trace_text(), run.events.len(), cpis))
        })?;
        let mut suite = Vec::new();
        let mut records: [Vec<CpiRecord>; 2] = [vec![], vec![]];
        for ((spec, role), (listing, trace, n, cpis)) in specs.iter().zip(runs) {
            st.write(&paths::workload(&spec.name), spec.to_toml().as_bytes())?;
            st.write(&paths::listing(&spec.name), listing.as_bytes())?;
            st.write(&paths::trace(&spec.name), trace.as_bytes())?;
            for (m, c) in cpis.into_iter().enumerate() {
                records[m].extend(c.into_iter().enumerate().map(|(i, cpi)| CpiRecord { program: spec.name.clone(), interval_index: i, cpi }));
            }
            suite.push(SuiteEntry { name: spec.name.clone(), role: *role, instructions: n as u64 });
        }
        for (m, kind) in [CostModelKind::Simple, CostModelKind::Complex].into_iter().enumerate() {
            st.write(&paths::cpi(kind), cpi_records_to_text(&records[m]).as_bytes())?;
        }
        st.json(paths::SUITE, &suite)?;
        st.finish()?;
        Ok(suite)
    }

    fn cpi_records(&self, kind: CostModelKind) -> Result<Vec<CpiRecord>> {
        Ok(cpi_records_from_text(&self.read_text(&paths::cpi(kind))?)?)
    }

    /// Segments traces into blocks and intervals and derives traditional BBVs.
    pub fn ingest(&self) -> Result<(usize, usize)> {
        let mut st = self.stage("ingest");
        let suite_rel = paths::SUITE.to_string();
        st.input("gen", &[suite_rel])?;
        let suite = self.suite()?;
        let cpi_rel = paths::cpi(self.config.cost_model);
        let traces: Vec<String> = suite.iter().map(|e| paths::trace(&e.name)).collect();
        let mut files = traces.clone();
        files.push(cpi_rel.clone());
        st.input("gen", &files)?;
        let cpis = cpi_map(&self.cpi_records(self.config.cost_model)?);
        let per = crate::par::try_map(&suite, |e| {
            let text = artifact::read_text(&self.path(&paths::trace(&e.name)))?;
            let seg = segment_trace(&parse_trace(&text)?);
            let ivs = slice_intervals(&e.name, &seg.execs, self.config.interval_len)?;
            Ok::<_, PipelineError>((seg.blocks, ivs))
        })?;
        let mut store = BlockStore::new();
        let mut intervals = Vec::new();
        for (blocks, ivs) in per {
            for b in blocks {
                store.insert(b)?;
            }
            intervals.extend(ivs);
        }
        for iv in &mut intervals {
            iv.cpi_true = cpis.get(&(iv.program_id.clone(), iv.interval_index)).copied();
        }
        let bbvs: String = intervals
            .iter()
            .map(|iv| {
                let r = BbvRecord { program_id: iv.program_id.clone(), interval_index: iv.interval_index, weights: traditional_bbv(iv).weights };
                serde_json::to_string(&r).expect("serializable") + "\n"
            })
            .collect();
        st.write(paths::BLOCKS, store.to_text().as_bytes())?;
        st.write(paths::INTERVALS, intervals_to_jsonl(&intervals).as_bytes())?;
        st.write(paths::BBVS, bbvs.as_bytes())?;
        st.finish()?;
        Ok((store.len(), intervals.len()))
    }

    fn block_store(&self) -> Result<BlockStore> {
        Ok(BlockStore::from_text(&self.read_text(paths::BLOCKS)?)?)
    }

    fn intervals(&self) -> Result<Vec<IntervalProfile>> {
        Ok(intervals_from_jsonl(&self.read_text(paths::INTERVALS)?)?)
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::from_text(&self.read_text(paths::VOCAB)?)?)
    }

    /// Builds the vocabulary and pre-trains the encoder on the function
    /// corpus plus every ingested block.
    pub fn pretrain(&self) -> Result<TrainingReport> {
        let mut st = self.stage("pretrain");
        st.input("ingest", &[paths::BLOCKS.to_string()])?;
        let table = SemanticTable::builtin();
        let store = self.block_store()?;
        let corpus = self.bcsd_corpus("train");
        let normalized = corpus.normalized();
        let vocab = Vocabulary::build(normalized.iter().chain(store.iter().flat_map(|b| b.instructions.iter())), table);
        let vocab_text = vocab.to_text();
        st.write(paths::VOCAB, vocab_text.as_bytes())?;

        let mut seqs: Vec<encoder::Sequence> =
            corpus.groups.iter().flatten().map(|f| sequence(&vocab, table, &f.iter().map(crate::asmnorm::normalize).collect::<Vec<_>>())).collect();
        seqs.extend(store.iter().map(|b| sequence(&vocab, table, &b.instructions)));
        let seed = self.seed("pretrain");
        let enc = Encoder::for_vocab(self.config.encoder.clone(), &vocab, seed)?;
        let mut pt = Pretrainer::new(enc, encoder::PretrainConfig { seed, ..self.config.pretrain.clone() });
        let trace = pt.train(&seqs)?;
        let enc = pt.finish();
        save_weights(&self.path(paths::ENCODER_PRETRAINED), &enc, &sha256_hex(vocab_text.as_bytes()), seed)?;
        st.produced(paths::pair(paths::ENCODER_PRETRAINED));
        let report = TrainingReport {
            steps: trace.len(),
            first: json_value(&trace.first()),
            last: json_value(&trace.last()),
            trace: json_value(&trace),
            baseline: Some(ntp_uniform_baseline(&enc.vocab_sizes)),
        };
        st.json("reports/pretrain.json", &report)?;
        st.finish()?;
        Ok(report)
    }

    fn encoded_groups(&self, corpus: &BcsdCorpus, vocab: &Vocabulary) -> Vec<Vec<Vec<crate::asmnorm::EncodedToken>>> {
        corpus.encode(vocab, SemanticTable::builtin())
    }

    /// Triplet fine-tuning on groups of transformed functions.
    pub fn finetune_encoder(&self) -> Result<TrainingReport> {
        let mut st = self.stage("finetune-encoder");
        let mut files = vec![paths::VOCAB.to_string()];
        files.extend(paths::pair(paths::ENCODER_PRETRAINED));
        st.input("pretrain", &files)?;
        let vocab = self.vocab()?;
        let (mut enc, meta) = load_weights(&self.path(paths::ENCODER_PRETRAINED))?;
        let groups = self.encoded_groups(&self.bcsd_corpus("train"), &vocab);
        let seed = self.seed("finetune-encoder");
        let trace = finetune(&mut enc, &groups, &encoder::FinetuneConfig { seed, ..self.config.finetune.clone() })?;
        save_weights(&self.path(paths::ENCODER), &enc, &meta.vocab_sha256, seed)?;
        st.produced(paths::pair(paths::ENCODER));
        let report = TrainingReport {
            steps: trace.len(),
            first: json_value(&trace.first()),
            last: json_value(&trace.last()),
            trace: json_value(&trace),
            baseline: None,
        };
        st.json("reports/finetune-encoder.json", &report)?;
        st.finish()?;
        Ok(report)
    }

    /// Embeds every stored block with the fine-tuned encoder.
    pub fn embed(&self) -> Result<usize> {
        let mut st = self.stage("embed");
        st.input("ingest", &[paths::BLOCKS.to_string()])?;
        st.input("pretrain", &[paths::VOCAB.to_string()])?;
        st.input("finetune-encoder", &paths::pair(paths::ENCODER))?;
        let vocab = self.vocab()?;
        let (enc, _) = load_weights(&self.path(paths::ENCODER))?;
        let store = self.block_store()?;
        let table = SemanticTable::builtin();
        let seqs: Vec<_> = store.iter().map(|b| vocab.encode_instructions(&b.instructions, table)).collect();
        let embs = enc.encode_many(&seqs)?;
        let m = Matrix::from_vec(embs.len(), enc.config.bbe_size, embs.concat());
        let meta = BbeMeta { encoder_sha256: hash_file(&self.path(&paths::pair(paths::ENCODER)[1]))?, blocks: store.iter().map(|b| b.id).collect() };
        save_matrix(&self.path(paths::BBE), "bbe", &m, json_value(&meta))?;
        st.produced(paths::pair(paths::BBE));
        st.finish()?;
        Ok(embs.len())
    }

    fn bbe_lookup(&self) -> Result<HashMap<BlockId, Vec<f64>>> {
        let (manifest, m) = load_matrix(&self.path(paths::BBE), "bbe")?;
        let meta: BbeMeta = serde_json::from_value(manifest.meta)
            .map_err(|e| ArtifactError::Format { path: self.path(&paths::pair(paths::BBE)[0]), reason: e.to_string() })?;
        Ok(meta.blocks.into_iter().enumerate().map(|(i, b)| (b, m.row(i).to_vec())).collect())
    }

    /// Full intervals of `programs`, with CPIs from `cpis`.
    fn samples(&self, programs: &[String], cpis: &HashMap<(String, usize), f64>) -> Result<Vec<IntervalSample>> {
        let bbes = self.bbe_lookup()?;
        let wanted: std::collections::HashSet<&String> = programs.iter().collect();
        let ivs: Vec<IntervalProfile> = self.intervals()?.into_iter().filter(|iv| !iv.partial && wanted.contains(&iv.program_id)).collect();
        ivs.iter()
            .map(|iv| {
                let cpi = cpis.get(&(iv.program_id.clone(), iv.interval_index)).copied().ok_or_else(|| {
                    PipelineError::Check(format!("no oracle CPI for {} interval {}", iv.program_id, iv.interval_index))
                })?;
                Ok(IntervalSample {
                    program_id: iv.program_id.clone(),
                    interval_index: iv.interval_index,
                    set: weight_bbes(iv, &bbes)?,
                    cpi,
                    bbv: traditional_bbv(iv),
                })
            })
            .collect()
    }

    fn train_config(&self, stage: &str) -> TrainConfig {
        TrainConfig { seed: self.seed(stage), ..self.config.train.clone() }
    }

    /// Trains the set transformer on the training programs.
    pub fn train_aggregator(&self) -> Result<TrainingReport> {
        let mut st = self.stage("train-aggregator");
        st.input("gen", &[paths::SUITE.to_string(), paths::cpi(self.config.cost_model)])?;
        st.input("ingest", &[paths::INTERVALS.to_string()])?;
        st.input("embed", &paths::pair(paths::BBE))?;
        let cpis = cpi_map(&self.cpi_records(self.config.cost_model)?);
        let samples = self.samples(&self.programs(Role::Train)?, &cpis)?;
        let seed = self.seed("train-aggregator");
        let mut agg = Aggregator::new(self.config.aggregator.clone(), seed)?;
        let r = aggregator::train(&mut agg, &samples, &self.train_config("train-aggregator"))?;
        let meta = ModelMeta { config: agg.config.clone(), seed, base_model_sha256: None, dataset_fraction: None, programs: self.programs(Role::Train)? };
        aggregator::save_model(&self.path(paths::AGGREGATOR), &agg, &meta)?;
        st.produced(paths::pair(paths::AGGREGATOR));
        let report = TrainingReport {
            steps: r.trace.len(),
            first: json_value(&r.trace.first()),
            last: json_value(&r.trace.last()),
            trace: json_value(&r.trace),
            baseline: None,
        };
        st.json("reports/train-aggregator.json", &report)?;
        st.finish()?;
        Ok(report)
    }

    /// Signatures for every full interval of every program.
    pub fn sign(&self) -> Result<usize> {
        let mut st = self.stage("sign");
        st.input("ingest", &[paths::INTERVALS.to_string()])?;
        st.input("embed", &paths::pair(paths::BBE))?;
        st.input("train-aggregator", &paths::pair(paths::AGGREGATOR))?;
        let (agg, _, sha) = aggregator::load_model(&self.path(paths::AGGREGATOR))?;
        let bbes = self.bbe_lookup()?;
        let ivs: Vec<IntervalProfile> = self.intervals()?.into_iter().filter(|iv| !iv.partial).collect();
        let sets = ivs.iter().map(|iv| weight_bbes(iv, &bbes)).collect::<std::result::Result<Vec<_>, _>>()?;
        let outs = agg.infer_many(&sets)?;
        let width = agg.config.signature_size();
        let sigs = SignatureSet {
            model_sha256: sha,
            index: ivs
                .iter()
                .map(|iv| SignatureIndexEntry {
                    program_id: iv.program_id.clone(),
                    interval_index: iv.interval_index,
                    cpi_true: iv.cpi_true,
                    instrs: iv.instr_total,
                })
                .collect(),
            matrix: Matrix::from_vec(outs.len(), width, outs.into_iter().flat_map(|o| o.0).collect()),
        };
        aggregator::save_signatures(&self.path(paths::SIGNATURES), &sigs)?;
        let stem = paths::SIGNATURES;
        st.produced([format!("{stem}.json"), format!("{stem}.bin"), format!("{stem}.index.jsonl")]);
        st.finish()?;
        Ok(sigs.len())
    }

    /// L2-normalized features of the eval programs' full intervals.
    pub fn features(&self, kind: FeatureKind) -> Result<Features> {
        let eval: std::collections::HashSet<String> = self.programs(Role::Eval)?.into_iter().collect();
        match kind {
            FeatureKind::Semantic => {
                let sigs = aggregator::load_signatures(&self.path(paths::SIGNATURES))?;
                let rows: Vec<usize> = (0..sigs.len()).filter(|&i| eval.contains(&sigs.index[i].program_id)).collect();
                let m = Matrix::from_vec(rows.len(), sigs.matrix.cols, rows.iter().flat_map(|&i| sigs.row(i).to_vec()).collect());
                let records = rows
                    .iter()
                    .map(|&i| {
                        let e = &sigs.index[i];
                        IntervalRecord { program_id: e.program_id.clone(), interval_index: e.interval_index, instrs: e.instrs, cpi_true: e.cpi_true }
                    })
                    .collect();
                Ok(Features { points: normalize_rows(&m), records })
            }
            FeatureKind::Traditional => {
                let ivs: Vec<IntervalProfile> =
                    self.intervals()?.into_iter().filter(|iv| !iv.partial && eval.contains(&iv.program_id)).collect();
                let bbvs: Vec<TraditionalBbv> = ivs.iter().map(traditional_bbv).collect();
                let space = BbvSpace::from_first_seen(bbvs.iter().flat_map(|b| b.weights.iter().map(|w| w.0)));
                let data = bbvs.iter().flat_map(|b| b.to_dense(&space)).collect();
                let m = Matrix::from_vec(ivs.len(), space.dim(), data);
                let records = ivs
                    .iter()
                    .map(|iv| IntervalRecord {
                        program_id: iv.program_id.clone(),
                        interval_index: iv.interval_index,
                        instrs: iv.instr_total,
                        cpi_true: iv.cpi_true,
                    })
                    .collect();
                Ok(Features { points: normalize_rows(&m), records })
            }
        }
    }

    fn feature_inputs(&self, st: &mut Stage<'_>, kind: FeatureKind) -> Result<()> {
        st.input("gen", &[paths::SUITE.to_string()])?;
        match kind {
            FeatureKind::Semantic => {
                let stem = paths::SIGNATURES;
                st.input("sign", &[format!("{stem}.json"), format!("{stem}.bin"), format!("{stem}.index.jsonl")])
            }
            FeatureKind::Traditional => st.input("ingest", &[paths::INTERVALS.to_string()]),
        }
    }

    fn kmeans(&self, k: usize, stage: &str) -> KMeansConfig {
        KMeansConfig { k, seed: self.seed(stage), max_iter: self.config.cluster.max_iter, restarts: self.config.cluster.restarts }
    }

    /// Global clustering of the eval programs' intervals.
    pub fn cluster(&self, kind: FeatureKind, k: Option<usize>) -> Result<ClusterReport> {
        let name = format!("cluster-{}", feature_name(kind));
        let mut st = self.stage(&name);
        let k = k.unwrap_or(self.config.cluster.k);
        st.extra = serde_json::json!({ "k": k, "feature": feature_name(kind) });
        self.feature_inputs(&mut st, kind)?;
        let f = self.features(kind)?;
        let model = kmeans_fit(&f.points, &self.kmeans(k, &name), kind)?;
        let keys: Vec<(String, usize)> = f.records.iter().map(|r| (r.program_id.clone(), r.interval_index)).collect();
        let reps = pick_representatives(&model, &f.points, &keys)?;
        let stem = format!("clusters/{}", feature_name(kind));
        phases::save_model(&self.path(&stem), &model)?;
        st.produced(paths::pair(&stem));
        let reps_rel = format!("{stem}.reps.jsonl");
        phases::save_representatives(&self.path(&reps_rel), &reps)?;
        st.produced([reps_rel]);
        let mut sizes = vec![0; k];
        model.assign_all(&f.points)?.iter().for_each(|a| sizes[a.0] += 1);
        let report = ClusterReport {
            feature_kind: kind,
            k,
            points: f.points.rows,
            inertia: model.inertia,
            silhouette: silhouette(&model, &f.points)?,
            sizes,
        };
        st.json(&format!("reports/{name}.json"), &report)?;
        st.finish()?;
        Ok(report)
    }

    /// Intra- or cross-program CPI estimation over the eval programs.
    pub fn estimate(&self, mode: EstimateMode, kind: FeatureKind, k: Option<usize>) -> Result<EstimationReport> {
        let mode_name = match mode {
            EstimateMode::Intra => "intra",
            EstimateMode::Cross => "cross",
        };
        let name = format!("estimate-{mode_name}-{}", feature_name(kind));
        let mut st = self.stage(&name);
        let k = k.unwrap_or(self.config.cluster.k);
        st.extra = serde_json::json!({ "k": k, "mode": mode_name, "feature": feature_name(kind) });
        self.feature_inputs(&mut st, kind)?;
        st.input("gen", &[paths::cpi(self.config.cost_model)])?;
        let f = self.features(kind)?;
        // The oracle is consulted only for representatives.
        let oracle = cpi_map(&self.cpi_records(self.config.cost_model)?);
        let simulate = |r: &phases::Representative| oracle[&(r.program_id.clone(), r.interval_index)];
        let len = self.config.interval_len as u64;
        let cfg = self.kmeans(k, &name);
        let report = match mode {
            EstimateMode::Intra => intra_program_eval(&f.points, &f.records, &cfg, kind, len, simulate)?,
            EstimateMode::Cross => cross_program_eval(&f.points, &f.records, &cfg, kind, len, simulate)?,
        };
        st.json(&format!("reports/{name}.json"), &report)?;
        st.write(&format!("reports/{name}.txt"), report.table().as_bytes())?;
        st.finish()?;
        Ok(report)
    }

    /// Fine-tunes the aggregator on a small slice of another cost model's
    /// data and compares CPI-head accuracy on the remaining eval programs.
    pub fn adapt(&self) -> Result<AdaptReport> {
        let mut st = self.stage("adapt");
        let target = self.config.adapt_cost_model;
        st.input("gen", &[paths::SUITE.to_string(), paths::cpi(target)])?;
        st.input("ingest", &[paths::INTERVALS.to_string()])?;
        st.input("embed", &paths::pair(paths::BBE))?;
        st.input("train-aggregator", &paths::pair(paths::AGGREGATOR))?;
        let seed = self.seed("adapt");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut eval = self.programs(Role::Eval)?;
        eval.shuffle(&mut rng);
        let (tune_programs, held_out) = eval.split_at(self.config.adapt.programs);
        let mut tune_programs = tune_programs.to_vec();
        tune_programs.sort();
        let mut held_out = held_out.to_vec();
        held_out.sort();
        let cpis = cpi_map(&self.cpi_records(target)?);
        let mut pool = self.samples(&tune_programs, &cpis)?;
        pool.shuffle(&mut rng);
        let n = ((pool.len() as f64 * self.config.adapt.fraction).ceil() as usize).clamp(1, pool.len().max(1));
        pool.truncate(n);
        pool.sort_by(|a, b| (&a.program_id, a.interval_index).cmp(&(&b.program_id, b.interval_index)));

        let (base, _, base_sha) = aggregator::load_model(&self.path(paths::AGGREGATOR))?;
        let mut tuned = base.clone();
        let cfg = TrainConfig { steps: self.config.adapt.steps, lr: self.config.adapt.lr, ..self.train_config("adapt") };
        aggregator::train(&mut tuned, &pool, &cfg)?;
        let meta = ModelMeta {
            config: tuned.config.clone(),
            seed,
            base_model_sha256: Some(base_sha),
            dataset_fraction: Some(self.config.adapt.fraction),
            programs: tune_programs.clone(),
        };
        aggregator::save_model(&self.path(paths::AGGREGATOR_ADAPTED), &tuned, &meta)?;
        st.produced(paths::pair(paths::AGGREGATOR_ADAPTED));

        let test = self.samples(&held_out, &cpis)?;
        let score = |agg: &Aggregator| -> Result<Vec<(String, f64)>> {
            let sets: Vec<_> = test.iter().map(|s| s.set.clone()).collect();
            let preds = agg.infer_many(&sets)?;
            let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (s, (_, c)) in test.iter().zip(preds) {
                per.entry(s.program_id.clone()).or_default().push(accuracy(c, s.cpi));
            }
            Ok(per.into_iter().map(|(p, a)| (p, a.iter().sum::<f64>() / a.len() as f64)).collect())
        };
        let zero = score(&base)?;
        let adapted = score(&tuned)?;
        let held: Vec<AdaptProgram> = zero
            .iter()
            .zip(&adapted)
            .map(|((p, z), (_, a))| AdaptProgram { program_id: p.clone(), zero_shot_accuracy: *z, adapted_accuracy: *a })
            .collect();
        let mean = |f: fn(&AdaptProgram) -> f64| held.iter().map(f).sum::<f64>() / held.len().max(1) as f64;
        let (zm, am) = (mean(|h| h.zero_shot_accuracy), mean(|h| h.adapted_accuracy));
        let report = AdaptReport {
            target_model: target,
            tuning_programs: tune_programs,
            tuning_intervals: pool.len(),
            dataset_fraction: self.config.adapt.fraction,
            held_out: held,
            zero_shot_mean: zm,
            adapted_mean: am,
            improvement_pp: 100.0 * (am - zm),
        };
        st.json("reports/adapt.json", &report)?;
        st.finish()?;
        Ok(report)
    }

    /// Retrieval on held-out functions: each original is the query, its
    /// transformed variant is the match, and the pool is every variant.
    pub fn eval_bcsd(&self) -> Result<BcsdReport> {
        let mut st = self.stage("eval-bcsd");
        st.input("pretrain", &[paths::VOCAB.to_string()])?;
        st.input("pretrain", &paths::pair(paths::ENCODER_PRETRAINED))?;
        st.input("finetune-encoder", &paths::pair(paths::ENCODER))?;
        let vocab = self.vocab()?;
        let groups = self.encoded_groups(&self.bcsd_corpus("eval"), &vocab);
        let queries: Vec<_> = groups.iter().map(|g| g[0].clone()).collect();
        let pool: Vec<_> = groups.iter().map(|g| g[1].clone()).collect();
        let run = |enc: &Encoder| -> Result<BcsdResult> {
            let q = enc.encode_many(&queries)?;
            let p = enc.encode_many(&pool)?;
            let pools = vec![p; q.len()];
            let matches: Vec<usize> = (0..q.len()).collect();
            Ok(bcsd_eval(&q, &pools, &matches)?)
        };
        let (finetuned, _) = load_weights(&self.path(paths::ENCODER))?;
        let (pretrained, _) = load_weights(&self.path(paths::ENCODER_PRETRAINED))?;
        let report = BcsdReport { finetuned: run(&finetuned)?, pretrained_only: run(&pretrained)?, random_baseline_mrr: random_mrr(pool.len()) };
        st.json("reports/bcsd.json", &report)?;
        st.finish()?;
        Ok(report)
    }

    /// Finite-difference checks of both models; fails above `1e-4`.
    pub fn gradcheck(&self) -> Result<GradCheckSummary> {
        const TOL: f64 = 1e-4;
        let st = self.stage("gradcheck");
        let seed = self.seed("gradcheck");
        let e = Encoder::grad_check(seed)?;
        let a = Aggregator::grad_check(seed)?;
        let summary = GradCheckSummary { max_rel_err: e.max_rel_err().max(a.max_rel_err()), encoder: e, aggregator: a, tolerance: TOL };
        let mut st = st;
        st.json("reports/gradcheck.json", &summary)?;
        st.finish()?;
        if summary.max_rel_err > TOL {
            return Err(PipelineError::Check(format!("gradient check max relative error {:.3e} exceeds {TOL:e}", summary.max_rel_err)));
        }
        Ok(summary)
    }

    /// Human-readable summary of every completed stage.
    pub fn report(&self) -> Result<String> {
        let dir = self.path("manifests");
        if !dir.is_dir() {
            return Err(ArtifactError::Missing { path: dir, hint: "no stage has run in this workdir; start with `gen`".into() }.into());
        }
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|source| ArtifactError::Io { path: dir.clone(), source })?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(ArtifactError::Missing { path: dir, hint: "no stage manifests found; start with `gen`".into() }.into());
        }
        let mut out = String::from("stage                      outputs  seconds  status\n");
        for n in &names {
            let m = StageManifest::load(&self.workdir, n)?;
            let status = match m.verify_outputs(&self.workdir) {
                Ok(()) => "ok".to_string(),
                Err(e) => format!("STALE ({e})"),
            };
            out += &format!("{:<26} {:>7} {:>8.1}  {status}\n", n, m.outputs.len(), m.elapsed_secs);
        }
        let reports = self.path("reports");
        let read = |name: &str| -> Option<serde_json::Value> {
            let p = reports.join(name);
            std::fs::read_to_string(p).ok().and_then(|t| serde_json::from_str(&t).ok())
        };
        if let Some(b) = read("bcsd.json") {
            out += &format!(
                "\nbcsd: MRR {:.4} (pretrained only {:.4}, random {:.4}), recall@1 {:.4}\n",
                b["finetuned"]["mrr"].as_f64().unwrap_or(f64::NAN),
                b["pretrained_only"]["mrr"].as_f64().unwrap_or(f64::NAN),
                b["random_baseline_mrr"].as_f64().unwrap_or(f64::NAN),
                b["finetuned"]["recall_at_1"].as_f64().unwrap_or(f64::NAN),
            );
        }
        for mode in ["intra", "cross"] {
            for feat in ["semantic", "traditional"] {
                if let Some(r) = read(&format!("estimate-{mode}-{feat}.json")) {
                    out += &format!(
                        "estimate {mode}/{feat}: mean accuracy {:.2}%, speedup {:.1}x (k {})\n",
                        100.0 * r["mean_accuracy"].as_f64().unwrap_or(f64::NAN),
                        r["speedup"].as_f64().unwrap_or(f64::NAN),
                        r["k"]
                    );
                }
            }
        }
        if let Some(a) = read("adapt.json") {
            out += &format!(
                "adapt: zero-shot {:.2}% → adapted {:.2}% ({:+.2} pp)\n",
                100.0 * a["zero_shot_mean"].as_f64().unwrap_or(f64::NAN),
                100.0 * a["adapted_mean"].as_f64().unwrap_or(f64::NAN),
                a["improvement_pp"].as_f64().unwrap_or(f64::NAN)
            );
        }
        if let Some(g) = read("gradcheck.json") {
            out += &format!("gradcheck: max relative error {:.3e}\n", g["max_rel_err"].as_f64().unwrap_or(f64::NAN));
        }
        Ok(out)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<()> {
        self.gen()?;
        self.ingest()?;
        self.pretrain()?;
        self.finetune_encoder()?;
        self.embed()?;
        self.train_aggregator()?;
        self.sign()?;
        for kind in [FeatureKind::Semantic, FeatureKind::Traditional] {
            self.cluster(kind, None)?;
            self.estimate(EstimateMode::Intra, kind, None)?;
            self.estimate(EstimateMode::Cross, kind, None)?;
        }
        self.adapt()?;
        self.eval_bcsd()?;
        self.gradcheck()?;
        Ok(())
    }
}

pub fn feature_name(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Semantic => "semantic",
        FeatureKind::Traditional => "traditional",
    }
}

/// Reads a run config file, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            Ok(RunConfig::from_toml(&text).map_err(|e| ConfigError(format!("{}: {}", p.display(), e.0)))?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_pipeline_runs_and_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let p = Pipeline::new(a.path(), RunConfig::quick()).unwrap();
        p.run_all().unwrap();
        let r = p.estimate(EstimateMode::Cross, FeatureKind::Semantic, None).unwrap();
        assert_eq!(r.simulated_instr, 3 * 512);
        assert!(p.report().unwrap().contains("estimate cross/semantic"));
        let ingest = StageManifest::load(a.path(), "ingest").unwrap();
        p.ingest().unwrap();
        assert_eq!(StageManifest::load(a.path(), "ingest").unwrap().outputs, ingest.outputs);
        let sign = StageManifest::load(a.path(), "sign").unwrap();
        p.train_aggregator().unwrap();
        p.sign().unwrap();
        assert_eq!(StageManifest::load(a.path(), "sign").unwrap().outputs, sign.outputs);
    }

    #[test]
    fn missing_and_tampered_artifacts() {
        let a = tempfile::tempdir().unwrap();
        let p = Pipeline::new(a.path(), RunConfig::quick()).unwrap();
        assert!(matches!(p.report(), Err(PipelineError::Artifact(ArtifactError::Missing { .. }))));
        assert!(matches!(p.ingest(), Err(PipelineError::Artifact(ArtifactError::Missing { .. }))));
        p.gen().unwrap();
        let cpi = p.path(&paths::cpi(CostModelKind::Simple));
        let mut text = std::fs::read_to_string(&cpi).unwrap();
        text.push('\n');
        std::fs::write(&cpi, text).unwrap();
        assert!(matches!(p.ingest(), Err(PipelineError::Artifact(ArtifactError::HashMismatch { .. }))));
    }
}
