//! Prompt-conditioned reward language model and the fused reward.
//!
//! The model is a one-layer causal attention network over word tokens,
//! prompt tokens and three reserved special tokens. Hypotheses are scored in
//! the conversational template
//! `<|user|>Generate a message optimized for {CP} <|end|><|assistant|> {hyp}`,
//! summing log-probabilities of the hypothesis tokens only.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rlfb_numerics::{AdamW, AdamWConfig, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grads::{self, gaussian, Leaves};
use crate::rng::Rng;
use crate::world::{Corpus, World};

pub const USER: &str = "<|user|>";
pub const END: &str = "<|end|>";
pub const ASSISTANT: &str = "<|assistant|>";
pub const SPECIALS: [&str; 3] = [USER, END, ASSISTANT];
pub const TEMPLATE_LEAD: &str = "Generate a message optimized for";
pub const GENERIC_PROMPT: &str = "Generate a message.";

const EMB: &str = "emb";
const POS: &str = "pos";
const WQ: &str = "att.wq";
const WK: &str = "att.wk";
const WV: &str = "att.wv";
const FFN_W: &str = "ffn.w";
const FFN_B: &str = "ffn.b";
const OUT_W: &str = "out.w";
const OUT_B: &str = "out.b";
const PARAM_NAMES: [&str; 9] = [EMB, POS, WQ, WK, WV, FFN_W, FFN_B, OUT_W, OUT_B];

/// The fused-reward knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the recognizer log-probability.
    pub lambda: f64,
    /// When false the domain prompt is replaced by `generic_prompt`.
    pub use_context: bool,
    pub generic_prompt: String,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            use_context: true,
            generic_prompt: GENERIC_PROMPT.to_string(),
        }
    }
}

impl RewardConfig {
    /// The prompt that fills the template slot for a domain.
    pub fn prompt_for<'a>(&'a self, domain_prompt: &'a str) -> &'a str {
        if self.use_context {
            domain_prompt
        } else {
            &self.generic_prompt
        }
    }
}

/// `p_llm + lambda * p_asr`.
pub fn reward(cfg: &RewardConfig, p_llm: f64, p_asr: f64) -> f64 {
    p_llm + cfg.lambda * p_asr
}

/// A rendered template; the scoring region starts at `hyp_start`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<String>,
    pub hyp_start: usize,
}

impl Rendered {
    /// Space-joined surface form, with the special markers glued to their
    /// neighbours as in the template.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let glue = i == 0
                || self.tokens[i - 1] == USER
                || (t == ASSISTANT && self.tokens[i - 1] == END);
            if !glue {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }
}

fn reject_specials(what: &str, words: impl IntoIterator<Item = impl AsRef<str>>) -> Result<()> {
    for w in words {
        let w = w.as_ref();
        if SPECIALS.iter().any(|s| w.contains(s)) {
            return Err(Error::Data(format!("{what} contains reserved token {w:?}")));
        }
    }
    Ok(())
}

/// Expands the conversational template around `cp` and `hypothesis`.
pub fn render_prompt(cp: &str, hypothesis: &[String]) -> Result<Rendered> {
    if hypothesis.is_empty() {
        return Err(Error::Data("cannot render an empty hypothesis".into()));
    }
    if cp.trim().is_empty() {
        return Err(Error::Data("empty contextual prompt".into()));
    }
    reject_specials("prompt", cp.split_whitespace())?;
    reject_specials("hypothesis", hypothesis)?;
    let mut tokens = vec![USER.to_string()];
    tokens.extend(TEMPLATE_LEAD.split_whitespace().map(str::to_string));
    tokens.extend(cp.split_whitespace().map(str::to_string));
    tokens.push(END.to_string());
    tokens.push(ASSISTANT.to_string());
    let hyp_start = tokens.len();
    tokens.extend(hypothesis.iter().cloned());
    Ok(Rendered { tokens, hyp_start })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub hidden: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Share of training sentences rendered with the generic prompt.
    pub generic_fraction: f64,
    pub heldout_fraction: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            max_len: 48,
            epochs: 6,
            lr: 3e-3,
            batch_size: 32,
            generic_fraction: 0.3,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    config: LmConfig,
    tokens: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RewardLm {
    pub params: ParamStore,
    cfg: LmConfig,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl RewardLm {
    /// Inventory: specials, template and prompt words, then `words`.
    pub fn new(
        prompt_words: &[String],
        words: &[String],
        cfg: &LmConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.hidden == 0 || cfg.max_len < 2 {
            return Err(Error::Config("lm hidden must be positive and max_len >= 2".into()));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let lead: Vec<String> = TEMPLATE_LEAD.split_whitespace().map(str::to_string).collect();
        let generic: Vec<String> = GENERIC_PROMPT.split_whitespace().map(str::to_string).collect();
        for w in lead.iter().chain(&generic).chain(prompt_words).chain(words) {
            if !tokens.contains(w) {
                tokens.push(w.clone());
            }
        }
        reject_specials("vocabulary", &tokens[3..])?;
        let h = cfg.hidden;
        let v = tokens.len();
        let inv = 1.0 / (h as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert(EMB, gaussian(rng, &[v, h], 1.0));
        p.insert(POS, gaussian(rng, &[cfg.max_len, h], 0.5));
        p.insert(WQ, gaussian(rng, &[h, h], inv));
        p.insert(WK, gaussian(rng, &[h, h], inv));
        p.insert(WV, gaussian(rng, &[h, h], inv));
        p.insert(FFN_W, gaussian(rng, &[h, h], inv));
        p.insert(FFN_B, rlfb_numerics::Tensor::zeros(&[h]));
        p.insert(OUT_W, gaussian(rng, &[v, h], inv));
        p.insert(OUT_B, rlfb_numerics::Tensor::zeros(&[v]));
        Ok(Self::assemble(p, cfg.clone(), tokens))
    }

    /// LM over a world's prompt words and vocabulary.
    pub fn for_world(world: &World, cfg: &LmConfig, rng: &mut Rng) -> Result<Self> {
        Self::new(&world.prompt_words(), &world.codebook.vocabulary, cfg, rng)
    }

    fn assemble(params: ParamStore, cfg: LmConfig, tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            params,
            cfg,
            tokens,
            index,
        }
    }

    /// Zeroes the output layer so every prediction is uniform.
    pub fn zero_output_head(&mut self) {
        let (v, h) = (self.tokens.len(), self.cfg.hidden);
        self.params.insert(OUT_W, rlfb_numerics::Tensor::zeros(&[v, h]));
        self.params.insert(OUT_B, rlfb_numerics::Tensor::zeros(&[v]));
    }

    pub fn inventory(&self) -> &[String] {
        &self.tokens
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn checkpoint_id(&self) -> String {
        self.params.checkpoint_id()
    }

    pub fn encode(&self, rendered: &Rendered) -> Result<Vec<usize>> {
        if rendered.tokens.len() > self.cfg.max_len {
            return Err(Error::Data(format!(
                "rendered prompt of {} tokens exceeds lm max_len {}",
                rendered.tokens.len(),
                self.cfg.max_len
            )));
        }
        rendered
            .tokens
            .iter()
            .map(|t| {
                self.index
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("token {t:?} outside the lm inventory")))
            })
            .collect()
    }

    /// Log-probabilities `[L]` of the hypothesis-region tokens.
    fn region_logprobs<'t>(&self, lv: &Leaves<'t>, ids: &[usize], hyp_start: usize) -> Var<'t> {
        let n = ids.len();
        let inputs = &ids[..n - 1];
        let positions: Vec<usize> = (0..n - 1).collect();
        let x = lv
            .get(EMB)
            .gather_rows(inputs)
            .add(&lv.get(POS).gather_rows(&positions));
        let q = x.matmul(&lv.get(WQ));
        let k = x.matmul(&lv.get(WK));
        let v = x.matmul(&lv.get(WV));
        let att = q
            .matmul_nt(&k)
            .scale(1.0 / (self.cfg.hidden as f64).sqrt())
            .softmax_rows(true);
        let h1 = x.add(&att.matmul(&v));
        let h2 = h1.add(&h1.matmul(&lv.get(FFN_W)).add_row(&lv.get(FFN_B)).tanh());
        // row i predicts token i + 1
        let rows: Vec<usize> = (hyp_start - 1..n - 1).collect();
        let logits = h2
            .gather_rows(&rows)
            .matmul_nt(&lv.get(OUT_W))
            .add_row(&lv.get(OUT_B));
        logits.log_softmax_rows().pick(&ids[hyp_start..])
    }

    fn check_rendered(rendered: &Rendered) -> Result<()> {
        if rendered.hyp_start == 0 || rendered.hyp_start >= rendered.tokens.len() {
            return Err(Error::Data("rendered prompt has no hypothesis region".into()));
        }
        Ok(())
    }

    /// Sum of hypothesis-token log-probabilities given everything before.
    pub fn lm_logprob(&self, rendered: &Rendered) -> Result<f64> {
        Self::check_rendered(rendered)?;
        let ids = self.encode(rendered)?;
        let tape = Tape::new();
        let lv = Leaves::new(&self.params, &PARAM_NAMES, &tape, false);
        Ok(self.region_logprobs(&lv, &ids, rendered.hyp_start).value().sum())
    }

    /// Per-token log-probabilities of the hypothesis region.
    pub fn token_logprobs(&self, rendered: &Rendered) -> Result<Vec<f64>> {
        Self::check_rendered(rendered)?;
        let ids = self.encode(rendered)?;
        let tape = Tape::new();
        let lv = Leaves::new(&self.params, &PARAM_NAMES, &tape, false);
        Ok(self
            .region_logprobs(&lv, &ids, rendered.hyp_start)
            .value()
            .data()
            .to_vec())
    }

    /// `lm_logprob` of `hypothesis` under prompt `cp`.
    pub fn score(&self, cp: &str, hypothesis: &[String]) -> Result<f64> {
        self.lm_logprob(&render_prompt(cp, hypothesis)?)
    }

    /// Mean per-token NLL over rendered examples.
    pub fn mean_nll(&self, data: &[Rendered]) -> Result<f64> {
        let mut nll = 0.0;
        let mut n = 0;
        for r in data {
            nll -= self.lm_logprob(r)?;
            n += r.tokens.len() - r.hyp_start;
        }
        if n == 0 {
            return Err(Error::Usage("no tokens to score".into()));
        }
        Ok(nll / n as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let id = self.params.save(dir)?;
        let meta = LmMeta {
            config: self.cfg.clone(),
            tokens: self.tokens.clone(),
        };
        fs::write(dir.join("lm.json"), serde_json::to_string(&meta)?)?;
        Ok(id)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: LmMeta = serde_json::from_str(&fs::read_to_string(dir.join("lm.json"))?)?;
        let params = ParamStore::load(dir)?;
        for n in PARAM_NAMES {
            if !params.contains(n) {
                return Err(Error::Data(format!("lm checkpoint lacks tensor {n}")));
            }
        }
        Ok(Self::assemble(params, meta.config, meta.tokens))
    }
}

/// Training-set rendering: each text-only sentence under its domain's
/// prompt, or the generic prompt with probability `generic_fraction`.
pub fn render_corpus(
    world: &World,
    corpus: &Corpus,
    generic_fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<Rendered>> {
    let mut out = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let spec = world
            .domain(&u.domain)
            .ok_or_else(|| Error::Data(format!("unknown domain {:?}", u.domain)))?;
        let cp = if rng.random::<f64>() < generic_fraction {
            GENERIC_PROMPT
        } else {
            spec.context_prompt.as_str()
        };
        out.push(render_prompt(cp, &u.text)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainLog {
    pub epoch: usize,
    pub train_nll: Option<f64>,
    pub heldout_nll: f64,
}

/// Fits the LM on rendered examples; every `1 / heldout_fraction`-th example
/// is held out for the NLL curve.
pub fn train_lm(lm: &mut RewardLm, data: &[Rendered], rng: &mut Rng) -> Result<Vec<LmTrainLog>> {
    if data.is_empty() {
        return Err(Error::Config("empty lm training corpus".into()));
    }
    let cfg = lm.cfg.clone();
    if cfg.batch_size == 0 {
        return Err(Error::Config("lm batch_size must be positive".into()));
    }
    let stride = if cfg.heldout_fraction > 0.0 {
        (1.0 / cfg.heldout_fraction).round().max(2.0) as usize
    } else {
        usize::MAX
    };
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, r) in data.iter().enumerate() {
        let ids = lm.encode(r)?;
        if i % stride == stride - 1 {
            held.push(r.clone());
        } else {
            train.push((ids, r.hyp_start));
        }
    }
    let score_held = |lm: &RewardLm| -> Result<f64> {
        if held.is_empty() {
            Ok(f64::NAN)
        } else {
            lm.mean_nll(&held)
        }
    };
    let mut log = vec![LmTrainLog {
        epoch: 0,
        train_nll: None,
        heldout_nll: score_held(lm)?,
    }];
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&(Vec<usize>, usize)> = chunk.iter().map(|&i| &train[i]).collect();
            let n_tokens: usize = batch.iter().map(|(ids, s)| ids.len() - s).sum();
            let (losses, g) = grads::parallel_grads(&lm.params, &PARAM_NAMES, &batch, |lv, (ids, s)| {
                Ok(lm.region_logprobs(lv, ids, *s).sum().neg())
            })?;
            total += losses.iter().sum::<f64>();
            count += n_tokens;
            grads::apply_grads(&mut lm.params, &g, 1.0 / n_tokens as f64, &mut opt)?;
        }
        log.push(LmTrainLog {
            epoch,
            train_nll: Some(total / count.max(1) as f64),
            heldout_nll: score_held(lm)?,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn toy_lm(seed: u64) -> RewardLm {
        let cfg = LmConfig {
            hidden: 8,
            max_len: 24,
            ..Default::default()
        };
        RewardLm::new(
            &words("ordering at Starbucks"),
            &words("latte please coffee"),
            &cfg,
            &mut stream(seed, "lm"),
        )
        .unwrap()
    }

    #[test]
    fn template_expansion_is_exact() {
        let r = render_prompt("ordering at Starbucks", &words("latte please")).unwrap();
        assert_eq!(
            r.to_text(),
            "<|user|>Generate a message optimized for ordering at Starbucks <|end|><|assistant|> latte please"
        );
        assert_eq!(&r.tokens[r.hyp_start..], &words("latte please")[..]);
    }

    #[test]
    fn generic_prompt_fills_slot_without_context() {
        let cfg = RewardConfig {
            use_context: false,
            ..Default::default()
        };
        let r = render_prompt(cfg.prompt_for("ordering at Starbucks"), &words("latte")).unwrap();
        assert_eq!(
            r.to_text(),
            "<|user|>Generate a message optimized for Generate a message. <|end|><|assistant|> latte"
        );
    }

    #[test]
    fn render_rejects_bad_input() {
        assert!(matches!(render_prompt("x", &[]), Err(Error::Data(_))));
        assert!(matches!(
            render_prompt("x", &words("hi <|end|>")),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn reward_arithmetic() {
        let mut cfg = RewardConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert_eq!(reward(&cfg, -2.0, -7.0), -2.0);
        cfg.lambda = 1.0;
        assert_eq!(reward(&cfg, -2.0, -3.0), -5.0);
        cfg.lambda = 0.5;
        assert_eq!(reward(&cfg, -2.0, -3.0), -3.5);
    }

    #[test]
    fn uniform_head_scores_uniformly() {
        let mut lm = toy_lm(1);
        lm.zero_output_head();
        let k = lm.inventory().len() as f64;
        let s = lm.score("ordering at Starbucks", &words("latte please coffee")).unwrap();
        assert!((s - 3.0 * (1.0 / k).ln()).abs() < 1e-6);
    }

    #[test]
    fn appending_a_token_lowers_the_score() {
        let lm = toy_lm(2);
        let a = lm.score("ordering at Starbucks", &words("latte")).unwrap();
        let b = lm.score("ordering at Starbucks", &words("latte please")).unwrap();
        assert!(b < a && a <= 0.0);
    }

    #[test]
    fn unknown_token_is_rejected() {
        let lm = toy_lm(3);
        assert!(matches!(
            lm.score("ordering at Starbucks", &words("zebra")),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn zero_lr_training_is_a_no_op() {
        let mut lm = toy_lm(4);
        lm.cfg.lr = 0.0;
        lm.cfg.epochs = 2;
        let before = lm.checkpoint_id();
        let data = vec![render_prompt("ordering at Starbucks", &words("latte please")).unwrap(); 4];
        train_lm(&mut lm, &data, &mut stream(4, "t")).unwrap();
        assert_eq!(lm.checkpoint_id(), before);
    }

    #[test]
    fn training_lowers_heldout_nll() {
        let mut lm = toy_lm(5);
        lm.cfg.epochs = 30;
        lm.cfg.lr = 0.01;
        lm.cfg.batch_size = 4;
        let data: Vec<Rendered> = ["latte please", "coffee please", "latte coffee please"]
            .iter()
            .cycle()
            .take(30)
            .map(|s| render_prompt("ordering at Starbucks", &words(s)).unwrap())
            .collect();
        let log = train_lm(&mut lm, &data, &mut stream(5, "t")).unwrap();
        assert!(log.last().unwrap().heldout_nll < log[0].heldout_nll);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let lm = toy_lm(6);
        let dir = tempfile::tempdir().unwrap();
        let id = lm.save(dir.path()).unwrap();
        let back = RewardLm::load(dir.path()).unwrap();
        assert_eq!(back.checkpoint_id(), id);
        assert_eq!(back.inventory(), lm.inventory());
    }
}
