//! On-disk experiment stages. Each stage reads its inputs from the run
//! directory, writes its outputs plus a `stage.json` manifest, and nothing else is
//! shared between stages.
//!
//! Layout under `<output root>/seed-<seed>/`:
//!
//! ```text
//! world/     world.json world.toml <split>.jsonl stage.json
//! pretrain/  checkpoint + log.jsonl stage.json
//! lm/        checkpoint + log.jsonl stage.json
//! adapt/<arm>/  checkpoint (trained arms) + log.jsonl stage.json
//! eval/<arm>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Scored};
use crate::lm::{render_corpus, train_lm, RewardLm};
use crate::policy::{pretrain, BeamConfig, Labeled, Policy};
use crate::rng::stream;
use crate::trainers::{collect_group, rescore_select, run_adaptation, AdaptContext, Algorithm};
use crate::world::{build_world, generate_corpus, validate_world, Corpus, Split, Splits, World};

pub const MANIFEST: &str = "stage.json";
pub const BASELINE: &str = "baseline";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Ids of everything the stage consumed.
    pub upstream: BTreeMap<String, String>,
    /// Id of the checkpoint the stage produced, if any.
    pub checkpoint_id: Option<String>,
    /// sha256 of each output file.
    pub files: BTreeMap<String, String>,
    pub algo: Option<String>,
    pub use_context: Option<bool>,
}

impl Manifest {
    pub fn read(dir: &Path, stage: &str) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                stage: stage.to_string(),
            });
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// What a metric file was computed from; `report` compares these.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// Config hash with the seed cleared, shared by every seed of a study.
    pub experiment: String,
    pub seed: u64,
    pub world: String,
    pub reference: String,
    pub lm: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricFile {
    #[serde(flatten)]
    pub report: EvalReport,
    pub lineage: Lineage,
}

/// An adaptation arm: an algorithm with or without the domain prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub algo: Algorithm,
    pub use_context: bool,
}

impl Arm {
    pub fn name(&self) -> String {
        if self.use_context {
            self.algo.as_str().to_string()
        } else {
            format!("{}-nocontext", self.algo)
        }
    }
}

/// Arms run by `all`: every algorithm plus the RAFT prompt ablation.
pub fn default_arms() -> Vec<Arm> {
    let mut arms: Vec<Arm> = Algorithm::ALL
        .into_iter()
        .map(|algo| Arm {
            algo,
            use_context: true,
        })
        .collect();
    arms.push(Arm {
        algo: Algorithm::Raft,
        use_context: false,
    });
    arms
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(crate::sha256_hex(&fs::read(path)?))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn hash_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name != MANIFEST && e.file_type()?.is_file() {
            files.insert(name, file_hash(&e.path())?);
        }
    }
    Ok(files)
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// One seed's run directory plus the config driving it.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub root: PathBuf,
}

impl Pipeline {
    /// Run directory `<output root>/seed-<seed>`.
    pub fn new(cfg: RunConfig) -> Self {
        let root = cfg.output_root().join(format!("seed-{}", cfg.seed));
        Self { cfg, root }
    }

    pub fn at(cfg: RunConfig, root: PathBuf) -> Self {
        Self { cfg, root }
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn adapt_dir(&self, arm: &Arm) -> PathBuf {
        self.root.join("adapt").join(arm.name())
    }

    pub fn eval_path(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.json"))
    }

    fn manifest(&self, stage: &str, upstream: BTreeMap<String, String>, checkpoint_id: Option<String>) -> Manifest {
        Manifest {
            stage: stage.to_string(),
            config_hash: self.cfg.stage_hash(stage),
            seed: self.cfg.seed,
            upstream,
            checkpoint_id,
            files: BTreeMap::new(),
            algo: None,
            use_context: None,
        }
    }

    fn finish(&self, dir: &Path, mut m: Manifest) -> Result<Manifest> {
        m.files = hash_files(dir)?;
        m.write(dir)?;
        Ok(m)
    }

    fn read_stage(&self, dir: &str, stage: &str) -> Result<Manifest> {
        let m = Manifest::read(&self.dir(dir), stage)?;
        if m.config_hash != self.cfg.stage_hash(stage) {
            log::warn!("{stage} artifacts were produced under a different config");
        }
        Ok(m)
    }

    /// Builds the world and all four splits.
    pub fn world(&self) -> Result<Manifest> {
        let dir = self.dir("world");
        fresh_dir(&dir)?;
        let seed = self.cfg.seed;
        let world = build_world(seed, &self.cfg.world, &mut stream(seed, "world"))?;
        let splits = generate_corpus(&world, &self.cfg.world, &mut stream(seed, "corpus"))?;
        fs::write(dir.join("world.json"), serde_json::to_string(&world)?)?;
        let flat = toml::to_string(&self.cfg.world).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("world.toml"), flat)?;
        let mut checksums = BTreeMap::new();
        for s in Split::ALL {
            let c = splits.get(s);
            fs::write(dir.join(format!("{}.jsonl", s.as_str())), c.to_jsonl()?)?;
            checksums.insert(format!("split.{}", s.as_str()), c.checksum()?);
        }
        log::info!("world: {} words, {} domains", world.codebook.vocabulary.len(), world.domains.len());
        let mut m = self.manifest("world", BTreeMap::new(), None);
        m.files = hash_files(&dir)?;
        m.files.extend(checksums);
        m.write(&dir)?;
        Ok(m)
    }

    pub fn load_world(&self) -> Result<World> {
        self.read_stage("world", "world")?;
        let world: World = serde_json::from_str(&fs::read_to_string(self.dir("world").join("world.json"))?)?;
        validate_world(&world)?;
        Ok(world)
    }

    pub fn load_split(&self, split: Split) -> Result<Corpus> {
        let m = self.read_stage("world", "world")?;
        let text = fs::read_to_string(self.dir("world").join(format!("{}.jsonl", split.as_str())))?;
        let c = Corpus::from_jsonl(split, &text)?;
        if m.files.get(&format!("split.{}", split.as_str())) != Some(&c.checksum()?) {
            return Err(Error::Lineage(format!(
                "{} split does not match its manifest checksum",
                split.as_str()
            )));
        }
        Ok(c)
    }

    pub fn load_splits(&self) -> Result<Splits> {
        Ok(Splits {
            pretrain: self.load_split(Split::Pretrain)?,
            adapt: self.load_split(Split::Adapt)?,
            test: self.load_split(Split::Test)?,
            lm_text: self.load_split(Split::LmText)?,
        })
    }

    fn world_id(&self) -> Result<String> {
        Ok(file_hash(&self.dir("world").join(MANIFEST))?)
    }

    /// Supervised pretraining on the source split.
    pub fn pretrain(&self) -> Result<Manifest> {
        let world = self.load_world()?;
        let corpus = self.load_split(Split::Pretrain)?;
        let seed = self.cfg.seed;
        let mut policy = Policy::new(&world.codebook, &self.cfg.policy, &mut stream(seed, "pretrain/init"))?;
        let data: Vec<Labeled<'_>> = corpus
            .utterances
            .iter()
            .map(|u| Labeled {
                frames: &u.frames,
                words: &u.text,
            })
            .collect();
        let log = pretrain(&mut policy, &data, &self.cfg.pretrain, &mut stream(seed, "pretrain/order"))?;
        if let Some(last) = log.last() {
            log::info!("pretrain: held-out nll {:.4} after {} epochs", last.heldout_nll, last.epoch);
        }
        let dir = self.dir("pretrain");
        fresh_dir(&dir)?;
        let id = policy.save(&dir)?;
        write_jsonl(&dir.join("log.jsonl"), &log)?;
        let upstream = BTreeMap::from([("world".to_string(), self.world_id()?)]);
        self.finish(&dir, self.manifest("pretrain", upstream, Some(id)))
    }

    /// Trains the reward LM on the text-only split.
    pub fn train_lm(&self) -> Result<Manifest> {
        let world = self.load_world()?;
        let corpus = self.load_split(Split::LmText)?;
        let seed = self.cfg.seed;
        let mut lm = RewardLm::for_world(&world, &self.cfg.lm, &mut stream(seed, "lm/init"))?;
        let data = render_corpus(&world, &corpus, self.cfg.lm.generic_fraction, &mut stream(seed, "lm/render"))?;
        let log = train_lm(&mut lm, &data, &mut stream(seed, "lm/order"))?;
        if let Some(last) = log.last() {
            log::info!("train-lm: held-out nll {:.4} after {} epochs", last.heldout_nll, last.epoch);
        }
        let dir = self.dir("lm");
        fresh_dir(&dir)?;
        let id = lm.save(&dir)?;
        write_jsonl(&dir.join("log.jsonl"), &log)?;
        let upstream = BTreeMap::from([("world".to_string(), self.world_id()?)]);
        self.finish(&dir, self.manifest("train-lm", upstream, Some(id)))
    }

    pub fn load_reference(&self) -> Result<(Policy, String)> {
        let m = self.read_stage("pretrain", "pretrain")?;
        let p = Policy::load(&self.dir("pretrain"))?;
        let id = p.checkpoint_id();
        if m.checkpoint_id.as_deref() != Some(id.as_str()) {
            return Err(Error::Lineage("pretrain checkpoint differs from its manifest".into()));
        }
        Ok((p, id))
    }

    pub fn load_lm(&self) -> Result<(RewardLm, String)> {
        let m = self.read_stage("lm", "train-lm")?;
        let lm = RewardLm::load(&self.dir("lm"))?;
        let id = lm.checkpoint_id();
        if m.checkpoint_id.as_deref() != Some(id.as_str()) {
            return Err(Error::Lineage("lm checkpoint differs from its manifest".into()));
        }
        Ok((lm, id))
    }

    /// Adapts the pretrained policy on the unlabeled adapt split.
    pub fn adapt(&self, arm: Arm) -> Result<Manifest> {
        let world = self.load_world()?;
        let corpus = self.load_split(Split::Adapt)?;
        let (reference, ref_id) = self.load_reference()?;
        let (lm, lm_id) = self.load_lm()?;
        let mut reward = self.cfg.reward.clone();
        reward.use_context &= arm.use_context;
        let beam = self.cfg.beam_config();
        let ctx = AdaptContext {
            world: &world,
            reference: &reference,
            lm: &lm,
            reward: &reward,
            beam: &beam,
            train: &self.cfg.train,
            algo: arm.algo,
            seed: self.cfg.seed,
        };
        let (policy, log) = run_adaptation(&ctx, reference.clone(), &corpus.audio_only())?;
        if reference.checkpoint_id() != ref_id || lm.checkpoint_id() != lm_id {
            return Err(Error::Lineage("a frozen checkpoint changed during adaptation".into()));
        }
        let dir = self.adapt_dir(&arm);
        fresh_dir(&dir)?;
        let id = if arm.algo.trains() {
            policy.save(&dir)?
        } else {
            policy.checkpoint_id()
        };
        write_jsonl(&dir.join("log.jsonl"), &log)?;
        for s in &log {
            log::info!(
                "{} epoch {}: mean reward {:?}, loss {:?}, {} of {} groups degenerate",
                arm.name(),
                s.epoch,
                s.mean_reward,
                s.mean_loss,
                s.degenerate_groups,
                s.groups
            );
        }
        let upstream = BTreeMap::from([
            ("world".to_string(), self.world_id()?),
            ("reference".to_string(), ref_id),
            ("lm".to_string(), lm_id),
        ]);
        let mut m = self.manifest("adapt", upstream, Some(id));
        m.algo = Some(arm.algo.as_str().to_string());
        m.use_context = Some(reward.use_context);
        self.finish(&dir, m)
    }

    /// Arms with a finished adaptation stage, in directory order.
    pub fn adapted_arms(&self) -> Result<Vec<(String, Manifest)>> {
        let dir = self.root.join("adapt");
        let mut out = Vec::new();
        if !dir.exists() {
            return Ok(out);
        }
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for n in names {
            let d = dir.join(&n);
            if d.join(MANIFEST).exists() {
                out.push((n, Manifest::read(&d, "adapt")?));
            }
        }
        Ok(out)
    }

    fn lineage(&self, ref_id: &str, lm_id: &str) -> Result<Lineage> {
        let mut c = self.cfg.clone();
        c.seed = 0;
        Ok(Lineage {
            experiment: c.hash(),
            seed: self.cfg.seed,
            world: self.world_id()?,
            reference: ref_id.to_string(),
            lm: lm_id.to_string(),
        })
    }

    /// Scores the baseline and every adapted arm on the test split and writes
    /// one metric file per arm. Returns the written paths.
    pub fn eval(&self) -> Result<Vec<PathBuf>> {
        let world = self.load_world()?;
        let test = self.load_split(Split::Test)?;
        let (reference, ref_id) = self.load_reference()?;
        // the baseline alone needs no reward LM
        let lm_id = match Manifest::read(&self.dir("lm"), "train-lm") {
            Ok(m) => m.checkpoint_id.unwrap_or_default(),
            Err(Error::MissingArtifact { .. }) => String::new(),
            Err(e) => return Err(e),
        };
        let lineage = self.lineage(&ref_id, &lm_id)?;
        let seed = self.cfg.seed;
        fs::create_dir_all(self.root.join("eval"))?;
        let mut written = Vec::new();
        let mut emit = |name: &str, ckpt: &str, scored: Vec<Scored>, lineage: &Lineage| -> Result<()> {
            let report = evaluate(name, seed, ckpt, &scored)?;
            let path = self.eval_path(name);
            fs::write(
                &path,
                serde_json::to_string_pretty(&MetricFile {
                    report,
                    lineage: lineage.clone(),
                })?,
            )?;
            written.push(path);
            Ok(())
        };

        emit(BASELINE, &ref_id, greedy_scores(&reference, &test)?, &lineage)?;
        for (name, m) in self.adapted_arms()? {
            if m.upstream.get("reference") != Some(&ref_id) {
                return Err(Error::Lineage(format!(
                    "adapt/{name} was trained from a different reference; rerun it"
                )));
            }
            let algo: Algorithm = m.algo.as_deref().unwrap_or_default().parse()?;
            let ckpt = m.checkpoint_id.clone().unwrap_or_default();
            let scored = if algo.trains() {
                let p = Policy::load(&self.adapt_dir(&Arm {
                    algo,
                    use_context: m.use_context.unwrap_or(true),
                }))?;
                if p.checkpoint_id() != ckpt {
                    return Err(Error::Lineage(format!("adapt/{name} checkpoint differs from its manifest")));
                }
                greedy_scores(&p, &test)?
            } else {
                let (lm, lm_id) = self.load_lm()?;
                if m.upstream.get("lm") != Some(&lm_id) {
                    return Err(Error::Lineage(format!("adapt/{name} used a different reward LM")));
                }
                let mut reward = self.cfg.reward.clone();
                reward.use_context = m.use_context.unwrap_or(true);
                rescore_scores(&reference, &lm, &world, &reward, &self.cfg.beam_config(), seed, &test)?
            };
            emit(&name, &ckpt, scored, &lineage)?;
        }
        Ok(written)
    }

    /// Every stage for this seed with the given arms.
    pub fn run_all(&self, arms: &[Arm]) -> Result<Vec<PathBuf>> {
        self.world()?;
        self.pretrain()?;
        self.train_lm()?;
        for arm in arms {
            self.adapt(*arm)?;
        }
        self.eval()
    }
}

fn scored_from(u: &crate::world::Utterance, hypothesis: Vec<String>) -> Scored {
    Scored {
        domain: u.domain.clone(),
        reference: u.text.clone(),
        hypothesis,
        entities: u.entities.clone(),
    }
}

/// Greedy transcripts of the test split. A decode that never emits EOS is
/// scored as the empty hypothesis.
pub fn greedy_scores(policy: &Policy, test: &Corpus) -> Result<Vec<Scored>> {
    test.utterances
        .par_iter()
        .map(|u| {
            let words = match policy.greedy_decode(&u.frames) {
                Ok(h) => policy.vocab().decode(&h.tokens),
                Err(Error::Decode { partial, .. }) => partial,
                Err(e) => return Err(e),
            };
            Ok(scored_from(u, words))
        })
        .collect()
}

/// N-best reranking by the fused reward with no parameter update. The n-best
/// list is the deterministic beam output, all finished hypotheses kept.
pub fn rescore_scores(
    policy: &Policy,
    lm: &RewardLm,
    world: &World,
    reward: &crate::lm::RewardConfig,
    beam: &BeamConfig,
    seed: u64,
    test: &Corpus,
) -> Result<Vec<Scored>> {
    let beam = BeamConfig {
        temperature: 0.0,
        keep: beam.pool,
        ..*beam
    };
    test.utterances
        .par_iter()
        .map(|u| {
            let prompt = world
                .domain(&u.domain)
                .map(|d| d.context_prompt.as_str())
                .ok_or_else(|| Error::Data(format!("unknown domain {:?}", u.domain)))?;
            let mut rng = stream(seed, &format!("eval/rescore/{}", u.id));
            let audio = crate::world::AudioUtterance {
                id: &u.id,
                domain: &u.domain,
                frames: &u.frames,
            };
            let words = match collect_group(policy, lm, reward, &beam, audio, prompt, &mut rng) {
                Ok(g) if !g.is_empty() => g.words[rescore_select(&g)?].clone(),
                Ok(_) | Err(Error::Decode { .. }) => Vec::new(),
                Err(e) => return Err(e),
            };
            Ok(scored_from(u, words))
        })
        .collect()
}

/// Reads every metric file under `dir` (recursively, `eval/*.json` only).
pub fn find_metric_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "json")
                && p.parent().and_then(|q| q.file_name()).is_some_and(|n| n == "eval")
            {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_metric_file(path: &Path) -> Result<MetricFile> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: "eval".into(),
        });
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// One value of a sweep with the table over its seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: String,
    pub table: crate::report::Table,
}

/// Runs every stage for each value of `param` and each seed, each in its own
/// directory under `<output root>/sweep/<param>=<value>/`.
pub fn run_sweep(
    config_text: &str,
    overrides: &[String],
    param: &str,
    values: &[String],
    seeds: &[u64],
    arms: &[Arm],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("sweep needs at least one value and one seed".into()));
    }
    let mut points = Vec::new();
    for v in values {
        let mut ov = overrides.to_vec();
        ov.push(format!("{param}={v}"));
        let base = RunConfig::from_toml_str(config_text, &ov)?;
        let dir = base.output_root().join("sweep").join(format!("{param}={v}"));
        let mut files = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let p = Pipeline::at(cfg, dir.join(format!("seed-{seed}")));
            for path in p.run_all(arms)? {
                files.push(read_metric_file(&path)?);
            }
        }
        let table = crate::report::build_table(&files)?;
        fs::write(dir.join("report.txt"), crate::report::render(&table))?;
        points.push(SweepPoint {
            param: param.to_string(),
            value: v.clone(),
            table,
        });
    }
    Ok(points)
}
