//! End-to-end staging: corpus, task-adapted model (TAM), per-user adapters
//! (OPPU), synthesized negatives, DPO, contrastive decoding and evaluation.
//!
//! Every stage reads and writes files under one run directory and records
//! content hashes in `manifest.json`. A stage whose inputs are unchanged and
//! whose outputs are intact is skipped, so runs resume where they stopped.
//! A recorded file whose bytes changed behind the pipeline's back is an
//! error rather than a silent re-run.

mod config;
mod manifest;
mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{BaseContrast, DiagnoseAdapter, PipelineConfig, PATH_KEYS, RUN_ROOT_ENV};
pub use manifest::{file_hash, RunManifest, StageRecord};
pub use sweep::{ablation_sweep, SweepAxis, SweepReport, SweepRow};

use crate::corpus::{self, CorpusIndex, Sample, UserSpec};
use crate::decode::{cope_generate, greedy_generate, DecodeConfig, DecodeTrace};
use crate::error::{Error, Result};
use crate::exec;
use crate::lmcore::{decode_text, TokenSequence, Vocabulary};
use crate::metrics::{perplexity, rouge1, rougeL, EvalReport, InstanceRow};
use crate::prefopt::{
    build_preference_dataset, read_preference_jsonl, synthesize_negative, train_dpo,
    write_preference_jsonl, DpoConfig, NegativeSynthesisConfig, PreferenceRecord, ReferenceModel,
};
use crate::reward::{reward_separation_report, sequence_reward, RewardConfig, SeparationReport, UserSamples};
use crate::tinylm::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use crate::tinylm::{train_sft, AdapterDelta, Dims, Example, ModelParams, TinyLm, Trainee};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenCorpus,
    TrainTask,
    TrainUser,
    SynthNeg,
    TrainDpo,
    Decode,
    Eval,
    DiagnoseReward,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenCorpus,
        Stage::TrainTask,
        Stage::TrainUser,
        Stage::SynthNeg,
        Stage::TrainDpo,
        Stage::Decode,
        Stage::Eval,
        Stage::DiagnoseReward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainTask => "train-task",
            Stage::TrainUser => "train-user",
            Stage::SynthNeg => "synth-neg",
            Stage::TrainDpo => "train-dpo",
            Stage::Decode => "decode",
            Stage::Eval => "eval",
            Stage::DiagnoseReward => "diagnose-reward",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Generation methods compared by the evaluation, in report order.
pub const METHODS: [&str; 5] = ["tam", "oppu", "oppu_cd", "dpo", "cope"];
/// Win-rates are computed against this method.
pub const BASELINE: &str = "tam";

/// One generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub user_id: String,
    pub instance: usize,
    pub method: String,
    pub input: String,
    pub output: String,
    pub ids: TokenSequence,
}

/// SplitMix64 finalizer over `a ⊕ f(b)`; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const ADAPTER_STREAM: u64 = 0x1000;
const NEGATIVE_STREAM: u64 = 0x2000;
const DPO_STREAM: u64 = 0x3000;

/// Base weights shared by every user.
pub struct BaseModels {
    pub vocab: Arc<Vocabulary>,
    pub dims: Dims,
    pub init: ModelParams,
    pub tam: ModelParams,
    pub tam_hash: String,
}

impl BaseModels {
    pub fn tam_model(&self) -> Result<TinyLm> {
        TinyLm::new(self.vocab.clone(), &self.tam, None)
    }

    pub fn with_adapter(&self, adapter: &AdapterDelta) -> Result<TinyLm> {
        TinyLm::new(self.vocab.clone(), &self.tam, Some(adapter))
    }

    pub fn contrast_model(&self, which: BaseContrast, oppu: &AdapterDelta) -> Result<TinyLm> {
        match which {
            BaseContrast::Init => TinyLm::new(self.vocab.clone(), &self.init, None),
            BaseContrast::Tam => self.tam_model(),
            BaseContrast::Oppu => self.with_adapter(oppu),
        }
    }
}

/// One user's test prompts in token form.
pub struct TestSet {
    pub user_id: String,
    pub samples: Vec<Sample>,
    pub prompts: Vec<TokenSequence>,
}

/// Generates `method`'s response; contrastive methods also return their trace.
pub fn generate(
    method: &str,
    base: &BaseModels,
    oppu: &AdapterDelta,
    dpo: &AdapterDelta,
    contrast: BaseContrast,
    prompt: &TokenSequence,
    dcfg: &DecodeConfig,
) -> Result<(TokenSequence, Option<DecodeTrace>)> {
    let greedy = |m: &TinyLm| greedy_generate(m, prompt, dcfg).map(|s| (s, None));
    let cope = |u: &TinyLm| {
        let b = base.contrast_model(contrast, oppu)?;
        cope_generate(u, &b, prompt, dcfg).map(|(s, t)| (s, Some(t)))
    };
    match method {
        "tam" => greedy(&base.tam_model()?),
        "oppu" => greedy(&base.with_adapter(oppu)?),
        "oppu_cd" => cope(&base.with_adapter(oppu)?),
        "dpo" => greedy(&base.with_adapter(dpo)?),
        "cope" => cope(&base.with_adapter(dpo)?),
        _ => Err(Error::Config(format!("unknown method {method:?}"))),
    }
}

/// Decodes every test prompt of one user with each of `methods`.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn decode_user(
    base: &BaseModels,
    test: &TestSet,
    oppu: &AdapterDelta,
    dpo: &AdapterDelta,
    contrast: BaseContrast,
    methods: &[&str],
    dcfg: &DecodeConfig,
) -> Result<(Vec<DecodeRecord>, Vec<(usize, DecodeTrace)>)> {
    let mut records = Vec::new();
    let mut traces = Vec::new();
    for (i, (sample, prompt)) in test.samples.iter().zip(&test.prompts).enumerate() {
        for &m in methods {
            let (ids, trace) = generate(m, base, oppu, dpo, contrast, prompt, dcfg)?;
            if let Some(t) = trace {
                if m == "cope" {
                    traces.push((i, t));
                }
            }
            records.push(DecodeRecord {
                user_id: test.user_id.clone(),
                instance: i,
                method: m.to_string(),
                input: sample.input.clone(),
                output: decode_text(&ids, &base.vocab)?,
                ids,
            });
        }
    }
    Ok((records, traces))
}

/// Scores generated responses against the gold outputs.
///
/// Perplexity is measured under the TAM; the reward is the length-normalized
/// α=1 implicit reward of the user's DPO model against the TAM.
pub fn evaluate_user(
    base: &BaseModels,
    test: &TestSet,
    dpo: &AdapterDelta,
    records: &[DecodeRecord],
) -> Result<Vec<InstanceRow>> {
    let tam = base.tam_model()?;
    let user = base.with_adapter(dpo)?;
    let rcfg = RewardConfig {
        alpha: 1.0,
        tau: 0.0,
        length_normalize: true,
    };
    records
        .iter()
        .map(|r| {
            let gold = &test
                .samples
                .get(r.instance)
                .ok_or_else(|| Error::InvalidArgument(format!("instance {} out of range", r.instance)))?
                .output;
            let prompt = &test.prompts[r.instance];
            Ok(InstanceRow {
                user_id: r.user_id.clone(),
                instance: r.instance,
                method: r.method.clone(),
                rouge1: rouge1(gold, &r.output).f1,
                rouge_l: rougeL(gold, &r.output).f1,
                perplexity: perplexity(&tam, prompt, &r.ids)?,
                sequence_reward: sequence_reward(&user, &tam, prompt, &r.ids, &rcfg)?,
            })
        })
        .collect()
}

/// Per-user DPO on a preference file, starting from the OPPU adapter.
pub fn train_user_dpo(
    base: &BaseModels,
    oppu: &AdapterDelta,
    prefs: &[PreferenceRecord],
    cfg: &DpoConfig,
) -> Result<(AdapterDelta, DpoSummary)> {
    let history: Vec<(TokenSequence, TokenSequence)> = prefs
        .iter()
        .map(|r| (r.prompt_ids.clone(), r.chosen_ids.clone()))
        .collect();
    let negatives: BTreeMap<usize, TokenSequence> = prefs
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.rejected_ids.clone()))
        .collect();
    let triples = build_preference_dataset(&history, &negatives)?;
    let mut adapter = oppu.clone();
    if triples.is_empty() {
        log::warn!("no usable preference pairs; keeping the OPPU adapter");
        return Ok((
            adapter,
            DpoSummary {
                triples: 0,
                margin_before: 0.0,
                margin_after: 0.0,
            },
        ));
    }
    let reference = match cfg.reference {
        ReferenceModel::OppuSnapshot => base.with_adapter(oppu)?,
        ReferenceModel::Tam => base.tam_model()?,
    };
    let rep = train_dpo(&base.tam, &mut adapter, &reference, &triples, cfg, base.vocab.pad())?;
    Ok((
        adapter,
        DpoSummary {
            triples: triples.len(),
            margin_before: rep.margin_before,
            margin_after: rep.margin_after,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoSummary {
    pub triples: usize,
    /// Mean β·r_dpo over the user's triples.
    pub margin_before: f64,
    pub margin_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_decode_records(path: &Path) -> Result<Vec<DecodeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// A run directory plus its manifest.
pub struct Pipeline {
    cfg: PipelineConfig,
    run_dir: PathBuf,
    manifest: RunManifest,
}

impl Pipeline {
    /// Opens (creating if needed) the run directory named by the config hash.
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        let dir = cfg.run_dir();
        Self::open_at(cfg, dir)
    }

    pub fn open_at(cfg: PipelineConfig, run_dir: PathBuf) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let hash = cfg.hash();
        let manifest = match RunManifest::load(&run_dir)? {
            Some(m) if m.config_hash != hash => {
                return Err(Error::Config(format!(
                    "run directory {} belongs to config {}, not {hash}",
                    run_dir.display(),
                    m.config_hash
                )))
            }
            Some(m) => m,
            None => RunManifest {
                config_hash: hash,
                config: cfg
                    .pairs()
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
                stages: BTreeMap::new(),
            },
        };
        let doc = cfg.to_document();
        let cfg_path = run_dir.join("config.txt");
        if !std::fs::read_to_string(&cfg_path).is_ok_and(|old| old == doc) {
            write_file(&cfg_path, &doc)?;
        }
        manifest.save(&run_dir)?;
        Ok(Self {
            cfg,
            run_dir,
            manifest,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Runs every stage in order, skipping those already up to date.
    pub fn run_all(&mut self) -> Result<RunManifest> {
        for s in Stage::ALL {
            self.run_stage(s)?;
        }
        Ok(self.manifest.clone())
    }

    /// Runs every stage up to and including `last`.
    pub fn run_through(&mut self, last: Stage) -> Result<()> {
        for s in Stage::ALL.into_iter().filter(|s| *s <= last) {
            self.run_stage(s)?;
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.name(),
                source: Box::new(other),
            },
        };
        let inputs = self.stage_inputs(stage).map_err(wrap)?;
        self.execute(stage, &inputs).map_err(wrap)
    }

    // ---- paths ----

    pub fn corpus_dir(&self) -> PathBuf {
        if self.cfg.corpus_dir.is_empty() {
            self.run_dir.join("corpus")
        } else {
            PathBuf::from(&self.cfg.corpus_dir)
        }
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.run_dir.join("checkpoints").join(name)
    }

    pub fn adapter_path(&self, kind: &str, user: &str) -> PathBuf {
        self.run_dir.join("checkpoints").join(kind).join(format!("{user}.bin"))
    }

    pub fn negatives_path(&self, user: &str) -> PathBuf {
        self.run_dir.join("negatives").join(format!("{user}.jsonl"))
    }

    pub fn decode_path(&self, user: &str) -> PathBuf {
        self.run_dir.join("decode").join(format!("{user}.jsonl"))
    }

    pub fn trace_path(&self, user: &str) -> PathBuf {
        self.run_dir.join("decode").join(format!("{user}_trace.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.run_dir.join("reports").join(name)
    }

    fn key(&self, p: &Path) -> String {
        match p.strip_prefix(&self.run_dir) {
            Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
            Err(_) => p.to_string_lossy().into_owned(),
        }
    }

    fn path_of(&self, key: &str) -> PathBuf {
        let p = Path::new(key);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.run_dir.join(p)
        }
    }

    // ---- loading ----

    pub fn corpus_index(&self) -> Result<CorpusIndex> {
        CorpusIndex::load(&self.corpus_dir())
    }

    pub fn users(&self) -> Result<Vec<UserSpec>> {
        let users: Vec<UserSpec> = self.corpus_index()?.target_users().cloned().collect();
        if users.len() < 2 {
            return Err(Error::Config("the corpus needs at least 2 target users".into()));
        }
        Ok(users)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.checkpoint("vocab.txt"))
    }

    pub fn base_models(&self) -> Result<BaseModels> {
        let vocab = Arc::new(self.vocab()?);
        let (init, _) = load_model(&self.checkpoint("init.bin"), &vocab)?;
        let (tam, tam_hash) = load_model(&self.checkpoint("tam.bin"), &vocab)?;
        Ok(BaseModels {
            dims: tam.dims,
            vocab,
            init,
            tam,
            tam_hash,
        })
    }

    pub fn load_user_adapter(&self, base: &BaseModels, kind: &str, user: &str) -> Result<AdapterDelta> {
        Ok(load_adapter(&self.adapter_path(kind, user), &base.vocab, base.dims, &base.tam_hash)?.0)
    }

    fn user_samples(&self, user: &str, split: &str) -> Result<Vec<Sample>> {
        corpus::read_jsonl(&corpus::user_file(&self.corpus_dir(), user, split))
    }

    pub fn test_set(&self, vocab: &Vocabulary, user: &str) -> Result<TestSet> {
        let samples = self.user_samples(user, "test")?;
        let prompts = samples.iter().map(|s| s.tokens(vocab).0).collect();
        Ok(TestSet {
            user_id: user.to_string(),
            samples,
            prompts,
        })
    }

    fn examples(vocab: &Vocabulary, samples: &[Sample]) -> Vec<Example> {
        samples
            .iter()
            .map(|s| {
                let (prompt, target) = s.tokens(vocab);
                Example { prompt, target }
            })
            .collect()
    }

    /// The evaluation report written by the eval stage.
    pub fn eval_report(&self) -> Result<EvalReport> {
        let p = self.report("eval.csv");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        EvalReport::from_rows(EvalReport::rows_from_csv(&text)?, BASELINE)
    }

    /// Own-versus-other implicit reward on each user's training samples.
    pub fn reward_separation(&self) -> Result<SeparationReport> {
        let base = self.base_models()?;
        let users = self.users()?;
        let kind = self.cfg.diagnose_adapter.to_string();
        let models: Vec<TinyLm> = users
            .iter()
            .map(|u| base.with_adapter(&self.load_user_adapter(&base, &kind, &u.user_id)?))
            .collect::<Result<_>>()?;
        let mut table = Vec::new();
        for (u, m) in users.iter().zip(&models) {
            let samples = self
                .user_samples(&u.user_id, "train")?
                .iter()
                .map(|s| s.tokens(&base.vocab))
                .collect();
            table.push(UserSamples {
                user_id: u.user_id.clone(),
                model: m,
                samples,
            });
        }
        reward_separation_report(&table, &base.tam_model()?)
    }

    // ---- stages ----

    fn corpus_files(&self) -> Result<Vec<PathBuf>> {
        let dir = self.corpus_dir();
        let mut files = vec![dir.join(corpus::INDEX_FILE), dir.join(corpus::POOLED_FILE)];
        for u in self.users()? {
            files.push(corpus::user_file(&dir, &u.user_id, "train"));
            files.push(corpus::user_file(&dir, &u.user_id, "test"));
        }
        Ok(files)
    }

    fn user_files(&self, f: impl Fn(&str) -> PathBuf) -> Result<Vec<PathBuf>> {
        Ok(self.users()?.iter().map(|u| f(&u.user_id)).collect())
    }

    fn stage_inputs(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let vocab_base = || vec![self.checkpoint("vocab.txt"), self.checkpoint("tam.bin")];
        let train = || self.user_files(|u| corpus::user_file(&self.corpus_dir(), u, "train"));
        let test = || self.user_files(|u| corpus::user_file(&self.corpus_dir(), u, "test"));
        let oppu = || self.user_files(|u| self.adapter_path("oppu", u));
        let dpo = || self.user_files(|u| self.adapter_path("dpo", u));
        let index = || self.corpus_dir().join(corpus::INDEX_FILE);
        Ok(match stage {
            Stage::GenCorpus => Vec::new(),
            Stage::TrainTask => vec![index(), self.corpus_dir().join(corpus::POOLED_FILE)],
            Stage::TrainUser => [vocab_base(), vec![index()], train()?].concat(),
            Stage::SynthNeg => [vocab_base(), vec![index()], train()?, oppu()?].concat(),
            Stage::TrainDpo => [
                vocab_base(),
                vec![index()],
                oppu()?,
                self.user_files(|u| self.negatives_path(u))?,
            ]
            .concat(),
            Stage::Decode => [
                vocab_base(),
                vec![self.checkpoint("init.bin"), index()],
                test()?,
                oppu()?,
                dpo()?,
            ]
            .concat(),
            Stage::Eval => [
                vocab_base(),
                vec![index()],
                test()?,
                dpo()?,
                self.user_files(|u| self.decode_path(u))?,
            ]
            .concat(),
            Stage::DiagnoseReward => {
                let kind = self.cfg.diagnose_adapter.to_string();
                [
                    vocab_base(),
                    vec![index()],
                    train()?,
                    self.user_files(|u| self.adapter_path(&kind, u))?,
                ]
                .concat()
            }
        })
    }

    fn execute(&mut self, stage: Stage, inputs: &[PathBuf]) -> Result<()> {
        let name = stage.name();
        let mut in_hashes = BTreeMap::new();
        for p in inputs {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!(
                    "missing input {}; run the upstream stage first",
                    p.display()
                )));
            }
            let current = file_hash(p)?;
            let key = self.key(p);
            if let Some(recorded) = self.manifest.produced(&key) {
                if recorded != current {
                    return Err(Error::StaleInput {
                        path: key,
                        recorded: recorded.to_string(),
                        current,
                    });
                }
            }
            in_hashes.insert(key, current);
        }
        if let Some(rec) = self.manifest.stages.get(name) {
            if rec.inputs == in_hashes {
                let mut intact = true;
                for (k, h) in &rec.outputs {
                    let p = self.path_of(k);
                    if !p.exists() {
                        intact = false;
                        continue;
                    }
                    let current = file_hash(&p)?;
                    if &current != h {
                        return Err(Error::StaleInput {
                            path: k.clone(),
                            recorded: h.clone(),
                            current,
                        });
                    }
                }
                if intact {
                    log::info!("stage {name}: up to date");
                    return Ok(());
                }
            }
        }
        log::info!("stage {name}: running");
        let start = Instant::now();
        let outputs = match stage {
            Stage::GenCorpus => self.gen_corpus()?,
            Stage::TrainTask => self.train_task()?,
            Stage::TrainUser => self.train_user()?,
            Stage::SynthNeg => self.synth_neg()?,
            Stage::TrainDpo => self.train_dpo()?,
            Stage::Decode => self.decode()?,
            Stage::Eval => self.eval()?,
            Stage::DiagnoseReward => self.diagnose_reward()?,
        };
        let mut out_hashes = BTreeMap::new();
        for p in &outputs {
            out_hashes.insert(self.key(p), file_hash(p)?);
        }
        let seconds = start.elapsed().as_secs_f64();
        log::info!("stage {name}: done in {seconds:.2}s");
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                inputs: in_hashes,
                outputs: out_hashes,
                seconds,
            },
        );
        self.manifest.save(&self.run_dir)
    }

    fn gen_corpus(&self) -> Result<Vec<PathBuf>> {
        if self.cfg.corpus_dir.is_empty() {
            let specs = corpus::default_user_specs(&self.cfg.corpus_config())?;
            corpus::gen_corpus(&specs, &self.corpus_dir())?;
        } else if !self.corpus_dir().join(corpus::INDEX_FILE).exists() {
            return Err(Error::Config(format!(
                "corpus_dir {} has no {}",
                self.cfg.corpus_dir,
                corpus::INDEX_FILE
            )));
        }
        self.corpus_files()
    }

    fn train_task(&self) -> Result<Vec<PathBuf>> {
        let vocab = corpus::corpus_vocabulary();
        let dims = self.cfg.dims(vocab.len());
        let init = ModelParams::init(dims, self.cfg.seed);
        let pooled = corpus::read_jsonl(&self.corpus_dir().join(corpus::POOLED_FILE))?;
        let data = Self::examples(&vocab, &pooled);
        let mut tam = init.clone();
        let rep = train_sft(
            &mut Trainee::Full(&mut tam),
            &data,
            &self.cfg.task_train_config(),
            vocab.pad(),
        )?;
        let vocab_path = self.checkpoint("vocab.txt");
        write_file(&vocab_path, &vocab.to_file_string())?;
        save_model(&self.checkpoint("init.bin"), &init, &vocab)?;
        save_model(&self.checkpoint("tam.bin"), &tam, &vocab)?;
        let log = TrainLog {
            epoch_losses: rep.epoch_losses,
            steps: rep.steps,
        };
        let report = self.report("train_task.json");
        write_file(&report, &(serde_json::to_string_pretty(&log)? + "\n"))?;
        Ok(vec![
            vocab_path,
            self.checkpoint("init.bin"),
            self.checkpoint("tam.bin"),
            report,
        ])
    }

    fn train_user(&self) -> Result<Vec<PathBuf>> {
        let base = self.base_models()?;
        let users = self.users()?;
        let cfg = &self.cfg;
        let trained: Vec<Result<(AdapterDelta, TrainLog)>> = exec::par_map_range(users.len(), |i| {
            let seed = mix_seed(cfg.seed, ADAPTER_STREAM + i as u64);
            let mut adapter = AdapterDelta::init(base.dims, cfg.adapter_rank, cfg.adapter_scale, seed)?;
            let data = Self::examples(&base.vocab, &self.user_samples(&users[i].user_id, "train")?);
            let tcfg = crate::tinylm::TrainConfig {
                seed,
                ..cfg.user_train_config()
            };
            let rep = train_sft(
                &mut Trainee::Adapter {
                    base: &base.tam,
                    adapter: &mut adapter,
                },
                &data,
                &tcfg,
                base.vocab.pad(),
            )?;
            Ok((
                adapter,
                TrainLog {
                    epoch_losses: rep.epoch_losses,
                    steps: rep.steps,
                },
            ))
        });
        let mut outputs = Vec::new();
        let mut logs = BTreeMap::new();
        for (u, r) in users.iter().zip(trained) {
            let (adapter, log) = r?;
            let p = self.adapter_path("oppu", &u.user_id);
            std::fs::create_dir_all(p.parent().expect("adapter dir")).map_err(|e| Error::io(&p, e))?;
            save_adapter(&p, &adapter, base.dims, &base.vocab, &base.tam_hash)?;
            outputs.push(p);
            logs.insert(u.user_id.clone(), log);
        }
        let report = self.report("train_user.json");
        write_file(&report, &(serde_json::to_string_pretty(&logs)? + "\n"))?;
        outputs.push(report);
        Ok(outputs)
    }

    fn synth_neg(&self) -> Result<Vec<PathBuf>> {
        let base = self.base_models()?;
        let users = self.users()?;
        let ncfg = self.cfg.negative_config();
        let results: Vec<Result<Vec<PreferenceRecord>>> = exec::par_map_range(users.len(), |ui| {
            let user = &users[ui].user_id;
            let oppu = base.with_adapter(&self.load_user_adapter(&base, "oppu", user)?)?;
            let tam = base.tam_model()?;
            let user_seed = mix_seed(self.cfg.seed, NEGATIVE_STREAM + ui as u64);
            let samples = self.user_samples(user, "train")?;
            let mut records = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let (prompt, gold) = s.tokens(&base.vocab);
                let cfg = NegativeSynthesisConfig {
                    seed: user_seed ^ i as u64,
                    ..ncfg.clone()
                };
                let choice = synthesize_negative(&tam, &oppu, &prompt, &cfg)?;
                let texts = choice
                    .candidates
                    .iter()
                    .map(|c| decode_text(c, &base.vocab))
                    .collect::<Result<Vec<_>>>()?;
                records.push(PreferenceRecord {
                    user_id: user.clone(),
                    input: s.input.clone(),
                    chosen: s.output.clone(),
                    rejected: texts[choice.chosen].clone(),
                    prompt_ids: prompt,
                    chosen_ids: gold,
                    rejected_ids: choice.negative().clone(),
                    candidates: texts,
                    candidate_ids: choice.candidates.clone(),
                    candidate_scores: choice.scores.clone(),
                    chosen_index: choice.chosen,
                });
            }
            Ok(records)
        });
        let mut outputs = Vec::new();
        for (u, r) in users.iter().zip(results) {
            let p = self.negatives_path(&u.user_id);
            std::fs::create_dir_all(p.parent().expect("negatives dir")).map_err(|e| Error::io(&p, e))?;
            write_preference_jsonl(&p, &r?)?;
            outputs.push(p);
        }
        Ok(outputs)
    }

    fn train_dpo(&self) -> Result<Vec<PathBuf>> {
        let base = self.base_models()?;
        let users = self.users()?;
        let results = exec::par_map_range(users.len(), |i| {
            let user = &users[i].user_id;
            let oppu = self.load_user_adapter(&base, "oppu", user)?;
            let prefs = read_preference_jsonl(&self.negatives_path(user))?;
            let cfg = DpoConfig {
                seed: mix_seed(self.cfg.seed, DPO_STREAM + i as u64),
                ..self.cfg.dpo_config()
            };
            train_user_dpo(&base, &oppu, &prefs, &cfg)
        });
        let mut outputs = Vec::new();
        let mut summary = BTreeMap::new();
        for (u, r) in users.iter().zip(results) {
            let (adapter, s) = r?;
            let p = self.adapter_path("dpo", &u.user_id);
            std::fs::create_dir_all(p.parent().expect("adapter dir")).map_err(|e| Error::io(&p, e))?;
            save_adapter(&p, &adapter, base.dims, &base.vocab, &base.tam_hash)?;
            outputs.push(p);
            summary.insert(u.user_id.clone(), s);
        }
        let report = self.report("train_dpo.json");
        write_file(&report, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
        outputs.push(report);
        Ok(outputs)
    }

    fn decode(&self) -> Result<Vec<PathBuf>> {
        let base = self.base_models()?;
        let users = self.users()?;
        let dcfg = self.cfg.decode_config();
        let results = exec::par_map(&users, |u| {
            let oppu = self.load_user_adapter(&base, "oppu", &u.user_id)?;
            let dpo = self.load_user_adapter(&base, "dpo", &u.user_id)?;
            let test = self.test_set(&base.vocab, &u.user_id)?;
            decode_user(&base, &test, &oppu, &dpo, self.cfg.base_contrast, &METHODS, &dcfg)
        });
        let mut outputs = Vec::new();
        for (u, r) in users.iter().zip(results) {
            let (records, traces) = r?;
            let p = self.decode_path(&u.user_id);
            write_file(&p, &to_jsonl(&records)?)?;
            let mut trace_text = String::new();
            for (i, t) in traces {
                for rec in t.0 {
                    let mut v = serde_json::to_value(rec)?;
                    v["instance"] = i.into();
                    trace_text.push_str(&serde_json::to_string(&v)?);
                    trace_text.push('\n');
                }
            }
            let tp = self.trace_path(&u.user_id);
            write_file(&tp, &trace_text)?;
            outputs.push(p);
            outputs.push(tp);
        }
        Ok(outputs)
    }

    fn eval(&self) -> Result<Vec<PathBuf>> {
        let base = self.base_models()?;
        let users = self.users()?;
        let results = exec::par_map(&users, |u| {
            let dpo = self.load_user_adapter(&base, "dpo", &u.user_id)?;
            let test = self.test_set(&base.vocab, &u.user_id)?;
            let records = read_decode_records(&self.decode_path(&u.user_id))?;
            evaluate_user(&base, &test, &dpo, &records)
        });
        let mut rows = Vec::new();
        for r in results {
            rows.extend(r?);
        }
        let report = EvalReport::from_rows(rows, BASELINE)?;
        let csv = self.report("eval.csv");
        let agg = self.report("aggregates.json");
        write_file(&csv, &report.to_csv())?;
        write_file(&agg, &report.aggregates_json())?;
        Ok(vec![csv, agg])
    }

    fn diagnose_reward(&self) -> Result<Vec<PathBuf>> {
        let rep = self.reward_separation()?;
        let p = self.report("reward_separation.csv");
        let mut text = rep.to_csv();
        text.push_str(&format!("global,{},{}\n", rep.global_own, rep.global_others));
        write_file(&p, &text)?;
        Ok(vec![p])
    }
}
