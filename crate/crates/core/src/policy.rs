//! The recognizer policy: frame encoder plus a single-attention decoder.
//!
//! The decoder state at output position `j` depends on the previous token and
//! `j` only, so teacher forcing is one batched pass and decoding costs one
//! row per live beam per step. Token embeddings (input and output) are the
//! fixed per-word pronunciation features multiplied by trainable maps, which
//! keeps words that never occur in training text reachable.
//!
//! The EOS score is a learned scalar indexed by how many frames the emitted
//! words leave unexplained. It does not share weights with word scores, so
//! updates about where a sentence ends cannot leak into earlier positions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use rlfb_numerics::{AdamW, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grads::{self, gaussian, GradMap, Leaves};
use crate::rng::Rng;
use crate::world::{Frames, WordCodebook};

pub const ENC_W: &str = "enc.w";
pub const ENC_B: &str = "enc.b";
pub const ENC_POS: &str = "enc.pos";
pub const ENC_END: &str = "enc.end";
pub const ATT_WQ: &str = "att.wq";
pub const ATT_WK: &str = "att.wk";
pub const ATT_WV: &str = "att.wv";
pub const LEX_IN: &str = "lex.in";
pub const LEX_OUT: &str = "lex.out";
pub const TOK_BOS: &str = "tok.bos";
pub const DEC_POS: &str = "dec.pos";
/// EOS logit as a function of the frames left after the words emitted so far.
pub const EOS_REM: &str = "eos.rem";
pub const OUT_WC: &str = "out.wc";
pub const OUT_WZ: &str = "out.wz";
pub const OUT_B: &str = "out.b";

const PARAM_NAMES: [&str; 15] = [
    ENC_W, ENC_B, ENC_POS, ENC_END, ATT_WQ, ATT_WK, ATT_WV, LEX_IN, LEX_OUT, TOK_BOS, DEC_POS,
    OUT_WC, OUT_WZ, OUT_B, EOS_REM,
];

/// Word tokens followed by EOS (output only) and BOS (input only).
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn eos(&self) -> usize {
        self.words.len()
    }

    pub fn bos(&self) -> usize {
        self.words.len() + 1
    }

    /// Width of every output distribution: words plus EOS.
    pub fn output_size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Token ids of `words` followed by EOS.
    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(words.len() + 1);
        for w in words {
            ids.push(
                self.id(w)
                    .ok_or_else(|| Error::Data(format!("unknown token {w:?}")))?,
            );
        }
        ids.push(self.eos());
        Ok(ids)
    }

    /// Words of a token sequence, dropping EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i < self.words.len())
            .map(|&i| self.words[i].clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Longest word sequence the decoder can emit before EOS.
    pub max_words: usize,
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            max_words: 10,
            init_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub heldout_fraction: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 3e-3,
            batch_size: 16,
            heldout_fraction: 0.1,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub width: usize,
    /// Decoding stops once `ceil(patience * width)` hypotheses have finished.
    pub patience: f64,
    pub temperature: f64,
    pub pool: usize,
    pub keep: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 8,
            patience: 3.0,
            temperature: 1.0,
            pool: 24,
            keep: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output token ids, ending with EOS unless `truncated`.
    pub tokens: Vec<usize>,
    pub per_token_logprob: Vec<f64>,
    pub total_logprob: f64,
    pub truncated: bool,
}

impl Hypothesis {
    fn from_steps(tokens: Vec<usize>, per_token_logprob: Vec<f64>, truncated: bool) -> Self {
        let total_logprob = per_token_logprob.iter().sum();
        Self {
            tokens,
            per_token_logprob,
            total_logprob,
            truncated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub beam_width: usize,
    pub patience: f64,
    pub temperature: f64,
    pub checkpoint_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utterance_id: String,
    /// Distinct sequences, highest `total_logprob` first.
    pub hypotheses: Vec<Hypothesis>,
    pub meta: GenerationMeta,
}

/// One training pair: frames and the target word sequence.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub frames: &'a Frames,
    pub words: &'a [String],
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    config: PolicyConfig,
    frames_per_word: usize,
    frame_dim: usize,
    words: Vec<String>,
    lexicon: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub params: ParamStore,
    cfg: PolicyConfig,
    vocab: Vocab,
    /// `[n_words, frames_per_word * frame_dim]` pronunciation features.
    lexicon: Option<Arc<Tensor>>,
    frames_per_word: usize,
    frame_dim: usize,
}

impl Policy {
    /// Random initialization over the codebook's words.
    pub fn new(codebook: &WordCodebook, cfg: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        Self::with_words(
            codebook.vocabulary.clone(),
            codebook.prototypes.clone(),
            codebook.frames_per_word,
            codebook.frame_dim,
            cfg,
            rng,
        )
    }

    pub fn with_words(
        words: Vec<String>,
        lexicon: Vec<Vec<f64>>,
        frames_per_word: usize,
        frame_dim: usize,
        cfg: &PolicyConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.hidden == 0 || cfg.max_words == 0 {
            return Err(Error::Config("policy hidden and max_words must be positive".into()));
        }
        let vocab = Vocab::new(words)?;
        let tdim = frames_per_word * frame_dim;
        if lexicon.len() != vocab.n_words() || lexicon.iter().any(|r| r.len() != tdim) {
            return Err(Error::Config("lexicon does not match the word list".into()));
        }
        let lexicon = (!lexicon.is_empty()).then(|| {
            Arc::new(Tensor::matrix(
                lexicon.len(),
                tdim,
                lexicon.into_iter().flatten().collect(),
            ))
        });
        let d = cfg.hidden;
        let s = cfg.init_scale;
        let inv = |n: usize| s / (n as f64).sqrt();
        let max_frames = cfg.max_words * frames_per_word;
        let mut p = ParamStore::new();
        p.insert(ENC_W, gaussian(rng, &[frame_dim, d], inv(frame_dim)));
        p.insert(ENC_B, Tensor::zeros(&[d]));
        p.insert(ENC_POS, gaussian(rng, &[max_frames + 1, d], 0.5 * s));
        p.insert(ENC_END, gaussian(rng, &[1, d], 0.5 * s));
        p.insert(ATT_WQ, gaussian(rng, &[d, d], inv(d)));
        p.insert(ATT_WK, gaussian(rng, &[d, d], inv(d)));
        p.insert(ATT_WV, gaussian(rng, &[d, d], inv(d)));
        p.insert(LEX_IN, gaussian(rng, &[tdim, d], inv(tdim)));
        p.insert(LEX_OUT, gaussian(rng, &[tdim, d], inv(tdim)));
        p.insert(TOK_BOS, gaussian(rng, &[1, d], 0.5 * s));
        p.insert(DEC_POS, gaussian(rng, &[cfg.max_words + 1, d], 0.5 * s));
        // rows 0..=max_frames, then one row for "past the end of the audio"
        p.insert(EOS_REM, Tensor::zeros(&[max_frames + 2, 1]));
        p.insert(OUT_WC, gaussian(rng, &[d, d], inv(d)));
        p.insert(OUT_WZ, gaussian(rng, &[d, d], inv(d)));
        p.insert(OUT_B, Tensor::zeros(&[d]));
        Ok(Self {
            params: p,
            cfg: cfg.clone(),
            vocab,
            lexicon,
            frames_per_word,
            frame_dim,
        })
    }

    /// Zeroes the output maps so every step distribution is exactly uniform.
    pub fn zero_output_head(&mut self) {
        let d = self.cfg.hidden;
        let tdim = self.frames_per_word * self.frame_dim;
        self.params.insert(LEX_OUT, Tensor::zeros(&[tdim, d]));
        self.params.insert(EOS_REM, Tensor::zeros(&[self.max_frames() + 2, 1]));
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn checkpoint_id(&self) -> String {
        self.params.checkpoint_id()
    }

    pub fn max_frames(&self) -> usize {
        self.cfg.max_words * self.frames_per_word
    }

    pub fn leaves<'t>(&self, tape: &'t Tape, trainable: bool) -> Leaves<'t> {
        Leaves::new(&self.params, &PARAM_NAMES, tape, trainable)
    }

    fn check_frames(&self, frames: &Frames) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::Data("utterance has no frames".into()));
        }
        if frames.dim != self.frame_dim {
            return Err(Error::Data(format!(
                "frame dim {} does not match policy dim {}",
                frames.dim, self.frame_dim
            )));
        }
        if frames.rows > self.max_frames() {
            return Err(Error::Data(format!(
                "{} frames exceed the policy limit of {}",
                frames.rows,
                self.max_frames()
            )));
        }
        Ok(())
    }

    /// Attention keys and values over the frames plus an end-of-audio slot.
    fn encode<'t>(&self, lv: &Leaves<'t>, frames: &Frames) -> Result<(Var<'t>, Var<'t>)> {
        self.check_frames(frames)?;
        let tape = lv.get(ENC_W).tape();
        let t = frames.rows;
        let x = tape.constant(Tensor::matrix(t, frames.dim, frames.data.clone()));
        let positions: Vec<usize> = (0..=t).collect();
        let pos = lv.get(ENC_POS).gather_rows(&positions);
        let h = x
            .matmul(&lv.get(ENC_W))
            .add_row(&lv.get(ENC_B))
            .add(&pos.gather_rows(&positions[..t]))
            .tanh();
        let end = lv.get(ENC_END).add(&pos.gather_rows(&[t])).tanh();
        let hf = Var::concat_rows(&[h, end]);
        Ok((hf.matmul(&lv.get(ATT_WK)), hf.matmul(&lv.get(ATT_WV))))
    }

    /// Input table `[n_words + 1, d]` (BOS last) and output table
    /// `[n_words + 1, d]` (a zero EOS row last; EOS is scored separately).
    fn token_tables<'t>(&self, lv: &Leaves<'t>) -> (Var<'t>, Var<'t>) {
        let tape = lv.get(LEX_IN).tape();
        let no_eos = tape.constant(Tensor::zeros(&[1, self.cfg.hidden]));
        match &self.lexicon {
            Some(lex) => {
                let l = tape.constant_shared(Arc::clone(lex));
                let tin = Var::concat_rows(&[l.matmul(&lv.get(LEX_IN)), lv.get(TOK_BOS)]);
                let tout = Var::concat_rows(&[l.matmul(&lv.get(LEX_OUT)), no_eos]);
                (tin, tout)
            }
            None => (lv.get(TOK_BOS), no_eos),
        }
    }

    /// Log-distributions `[n, output_size]` for rows `(prev token, position)`.
    fn step_logp<'t>(
        &self,
        lv: &Leaves<'t>,
        tables: (Var<'t>, Var<'t>),
        kv: (Var<'t>, Var<'t>),
        prev: &[usize],
        positions: &[usize],
    ) -> Var<'t> {
        let (tin, tout) = tables;
        let (k, v) = kv;
        // BOS sits right after the words in the input table
        let rows: Vec<usize> = prev
            .iter()
            .map(|&p| if p == self.vocab.bos() { self.vocab.n_words() } else { p })
            .collect();
        let z = tin
            .gather_rows(&rows)
            .add(&lv.get(DEC_POS).gather_rows(positions));
        let q = z.matmul(&lv.get(ATT_WQ));
        let att = q
            .matmul_nt(&k)
            .scale(1.0 / (self.cfg.hidden as f64).sqrt())
            .softmax_rows(false);
        let c = att.matmul(&v);
        let o = c
            .matmul(&lv.get(OUT_WC))
            .add(&z.matmul(&lv.get(OUT_WZ)))
            .add_row(&lv.get(OUT_B))
            .tanh();
        // EOS depends only on how much audio the emitted words leave over,
        // so pressure on where sentences end stays at the end
        let frames = k.value().shape()[0] - 1;
        let past_end = self.max_frames() + 1;
        let remaining: Vec<usize> = positions
            .iter()
            .map(|&j| frames.checked_sub(j * self.frames_per_word).unwrap_or(past_end))
            .collect();
        let mut to_eos = vec![0.0; self.vocab.output_size()];
        to_eos[self.vocab.eos()] = 1.0;
        let eos = lv
            .get(EOS_REM)
            .gather_rows(&remaining)
            .matmul(&o.tape().constant(Tensor::matrix(1, to_eos.len(), to_eos)));
        o.matmul_nt(&tout).add(&eos).log_softmax_rows()
    }

    /// Per-token log-probabilities `[L]` of `targets` (ids ending in EOS).
    pub fn token_logprobs_var<'t>(
        &self,
        lv: &Leaves<'t>,
        frames: &Frames,
        targets: &[usize],
    ) -> Result<Var<'t>> {
        if targets.is_empty() {
            return Err(Error::Data("empty target sequence".into()));
        }
        if targets.len() > self.cfg.max_words + 1 {
            return Err(Error::Data(format!(
                "target of {} tokens exceeds max_words {}",
                targets.len() - 1,
                self.cfg.max_words
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.vocab.output_size()) {
            return Err(Error::Data(format!("token id {bad} outside the output inventory")));
        }
        let kv = self.encode(lv, frames)?;
        let tables = self.token_tables(lv);
        let mut prev = vec![self.vocab.bos()];
        prev.extend_from_slice(&targets[..targets.len() - 1]);
        let positions: Vec<usize> = (0..targets.len()).collect();
        Ok(self.step_logp(lv, tables, kv, &prev, &positions).pick(targets))
    }

    /// `sum_t log pi(token_t | tokens_<t, frames)` for ids ending in EOS.
    pub fn sequence_logprob(&self, frames: &Frames, tokens: &[usize]) -> Result<f64> {
        if tokens.last() != Some(&self.vocab.eos()) {
            return Err(Error::Data("scored sequence must end with EOS".into()));
        }
        let tape = Tape::new();
        let lv = self.leaves(&tape, false);
        Ok(self.token_logprobs_var(&lv, frames, tokens)?.value().sum())
    }

    /// Per-token log-probabilities as plain values.
    pub fn token_logprobs(&self, frames: &Frames, tokens: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let lv = self.leaves(&tape, false);
        Ok(self
            .token_logprobs_var(&lv, frames, tokens)?
            .value()
            .data()
            .to_vec())
    }

    /// Full step distribution for a given prefix, for inspection and tests.
    pub fn next_token_logprobs(&self, frames: &Frames, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() > self.cfg.max_words {
            return Err(Error::Data("prefix longer than max_words".into()));
        }
        let tape = Tape::new();
        let lv = self.leaves(&tape, false);
        let kv = self.encode(&lv, frames)?;
        let tables = self.token_tables(&lv);
        let prev = prefix.last().copied().unwrap_or(self.vocab.bos());
        let lp = self.step_logp(&lv, tables, kv, &[prev], &[prefix.len()]);
        Ok(lp.value().data().to_vec())
    }

    /// Argmax decoding, ties toward the lowest token id. Hitting `max_words`
    /// without EOS returns the prefix flagged as truncated.
    pub fn greedy_decode(&self, frames: &Frames) -> Result<Hypothesis> {
        let tape = Tape::new();
        let lv = self.leaves(&tape, false);
        let kv = self.encode(&lv, frames)?;
        let tables = self.token_tables(&lv);
        let mut tokens = Vec::new();
        let mut lps = Vec::new();
        for pos in 0..=self.cfg.max_words {
            let prev = tokens.last().copied().unwrap_or(self.vocab.bos());
            let lp = self.step_logp(&lv, tables, kv, &[prev], &[pos]).value();
            let (best, &best_lp) = argmax(lp.data());
            if pos == self.cfg.max_words && best != self.vocab.eos() {
                return Ok(Hypothesis::from_steps(tokens, lps, true));
            }
            tokens.push(best);
            lps.push(best_lp);
            if best == self.vocab.eos() {
                break;
            }
        }
        Ok(Hypothesis::from_steps(tokens, lps, false))
    }

    /// Sampling beam search with patience.
    ///
    /// Each live beam proposes `width` distinct tokens drawn without
    /// replacement from its temperature-scaled step distribution (Gumbel
    /// top-k; exact top-k when `temperature == 0`). Proposals are ranked by
    /// true cumulative log-probability; EOS proposals reached before the
    /// beam set refills become finished hypotheses. Decoding stops after
    /// `ceil(patience * width)` finished hypotheses or at `max_words`. The
    /// best `pool` finished hypotheses form the pool, from which `keep` are
    /// drawn uniformly without replacement.
    pub fn beam_sample(
        &self,
        utterance_id: &str,
        frames: &Frames,
        beam: &BeamConfig,
        rng: &mut Rng,
    ) -> Result<NBestList> {
        if beam.width == 0 || !(beam.patience >= 1.0) || beam.keep > beam.pool || beam.keep == 0 {
            return Err(Error::Config(
                "beam needs width >= 1, patience >= 1 and 1 <= keep <= pool".into(),
            ));
        }
        if !(beam.temperature >= 0.0) {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        let target = (beam.patience * beam.width as f64).ceil() as usize;
        let eos = self.vocab.eos();

        let tape = Tape::new();
        let lv = self.leaves(&tape, false);
        let kv = self.encode(&lv, frames)?;
        let tables = self.token_tables(&lv);

        struct Beam {
            tokens: Vec<usize>,
            lps: Vec<f64>,
            total: f64,
        }
        let mut beams = vec![Beam {
            tokens: Vec::new(),
            lps: Vec::new(),
            total: 0.0,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();

        for pos in 0..=self.cfg.max_words {
            let prev: Vec<usize> = beams
                .iter()
                .map(|b| b.tokens.last().copied().unwrap_or(self.vocab.bos()))
                .collect();
            let positions = vec![pos; beams.len()];
            let lp = self.step_logp(&lv, tables, kv, &prev, &positions).value();

            // (total, beam, token, step logprob)
            let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
            for (bi, b) in beams.iter().enumerate() {
                let row = lp.row(bi);
                if pos == self.cfg.max_words {
                    // out of room: every live beam must end here
                    cands.push((b.total + row[eos], bi, eos, row[eos]));
                    continue;
                }
                for tok in propose(row, beam.width, beam.temperature, rng) {
                    cands.push((b.total + row[tok], bi, tok, row[tok]));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

            let mut next = Vec::with_capacity(beam.width);
            for (total, bi, tok, l) in cands {
                if next.len() == beam.width {
                    break;
                }
                let mut tokens = beams[bi].tokens.clone();
                let mut lps = beams[bi].lps.clone();
                tokens.push(tok);
                lps.push(l);
                if tok == eos {
                    finished.push(Hypothesis::from_steps(tokens, lps, false));
                } else {
                    next.push(Beam { tokens, lps, total });
                }
            }
            if finished.len() >= target || next.is_empty() {
                break;
            }
            beams = next;
        }

        if finished.is_empty() {
            let best = beams
                .first()
                .map(|b| self.vocab.decode(&b.tokens))
                .unwrap_or_default();
            return Err(Error::Decode {
                max_len: self.cfg.max_words,
                partial: best,
            });
        }
        // stable sort keeps finishing order among equal scores
        finished.sort_by(|a, b| b.total_logprob.total_cmp(&a.total_logprob));
        finished.truncate(beam.pool);
        let mut kept: Vec<Hypothesis> = if finished.len() <= beam.keep {
            finished
        } else {
            let mut idx = rand::seq::index::sample(rng, finished.len(), beam.keep).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| finished[i].clone()).collect()
        };
        kept.sort_by(|a, b| b.total_logprob.total_cmp(&a.total_logprob));
        Ok(NBestList {
            utterance_id: utterance_id.to_string(),
            hypotheses: kept,
            meta: GenerationMeta {
                beam_width: beam.width,
                patience: beam.patience,
                temperature: beam.temperature,
                checkpoint_id: self.checkpoint_id(),
            },
        })
    }

    /// Per-item losses and summed gradients, see [`grads::parallel_grads`].
    pub fn parallel_grads<T, F>(&self, items: &[T], loss_fn: F) -> Result<(Vec<f64>, GradMap)>
    where
        T: Sync,
        F: for<'t> Fn(&Leaves<'t>, &T) -> Result<Var<'t>> + Sync,
    {
        grads::parallel_grads(&self.params, &PARAM_NAMES, items, loss_fn)
    }

    pub fn apply_grads(&mut self, grads: &GradMap, scale: f64, opt: &mut AdamW) -> Result<()> {
        grads::apply_grads(&mut self.params, grads, scale, opt)
    }

    /// One gradient step on the mean token NLL of `batch`; returns the
    /// pre-step loss.
    pub fn teacher_forced_step(&mut self, batch: &[Labeled<'_>], opt: &mut AdamW) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Usage("empty training batch".into()));
        }
        let targets: Vec<(&Frames, Vec<usize>)> = batch
            .iter()
            .map(|b| Ok((b.frames, self.vocab.encode(b.words)?)))
            .collect::<Result<_>>()?;
        let n_tokens: usize = targets.iter().map(|(_, t)| t.len()).sum();
        let (losses, grads) = self.parallel_grads(&targets, |lv, (frames, t)| {
            Ok(self.token_logprobs_var(lv, frames, t)?.sum().neg())
        })?;
        let mean = losses.iter().sum::<f64>() / n_tokens as f64;
        self.apply_grads(&grads, 1.0 / n_tokens as f64, opt)?;
        Ok(mean)
    }

    /// Mean token NLL without updating.
    pub fn mean_nll(&self, data: &[Labeled<'_>]) -> Result<f64> {
        let per: Vec<Result<(f64, usize)>> = data
            .par_iter()
            .map(|b| {
                let t = self.vocab.encode(b.words)?;
                let lp: f64 = self.token_logprobs(b.frames, &t)?.iter().sum();
                Ok((-lp, t.len()))
            })
            .collect();
        let mut nll = 0.0;
        let mut n = 0;
        for r in per {
            let (l, c) = r?;
            nll += l;
            n += c;
        }
        if n == 0 {
            return Err(Error::Usage("no tokens to score".into()));
        }
        Ok(nll / n as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let id = self.params.save(dir)?;
        let meta = PolicyMeta {
            config: self.cfg.clone(),
            frames_per_word: self.frames_per_word,
            frame_dim: self.frame_dim,
            words: self.vocab.words.clone(),
            lexicon: match &self.lexicon {
                Some(l) => (0..l.dims2().0).map(|i| l.row(i).to_vec()).collect(),
                None => Vec::new(),
            },
        };
        fs::write(dir.join("policy.json"), serde_json::to_string(&meta)?)?;
        Ok(id)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: PolicyMeta = serde_json::from_str(&fs::read_to_string(dir.join("policy.json"))?)?;
        let params = ParamStore::load(dir)?;
        let mut dummy = crate::rng::stream(0, "policy-load");
        let mut p = Self::with_words(
            meta.words,
            meta.lexicon,
            meta.frames_per_word,
            meta.frame_dim,
            &meta.config,
            &mut dummy,
        )?;
        for n in PARAM_NAMES {
            if !params.contains(n) || params.get(n).shape() != p.params.get(n).shape() {
                return Err(Error::Data(format!("checkpoint tensor {n} missing or misshapen")));
            }
        }
        p.params = params;
        Ok(p)
    }
}

/// Index and value of the first maximum.
pub(crate) fn argmax(xs: &[f64]) -> (usize, &f64) {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    (best, &xs[best])
}

/// Up to `k` distinct token ids from a log-distribution.
fn propose(logp: &[f64], k: usize, temperature: f64, rng: &mut Rng) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = if temperature == 0.0 {
        logp.iter().enumerate().map(|(i, &l)| (l, i)).collect()
    } else {
        logp.iter()
            .enumerate()
            .map(|(i, &l)| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (l / temperature - (-u.ln()).ln(), i)
            })
            .collect()
    };
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keys.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Epoch summary from [`pretrain`]. Epoch 0 is the initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch: usize,
    pub train_nll: Option<f64>,
    pub heldout_nll: f64,
}

/// Supervised training on labeled source utterances. The last
/// `heldout_fraction` of `data` is held out for the NLL curve.
pub fn pretrain(
    policy: &mut Policy,
    data: &[Labeled<'_>],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<Vec<PretrainLog>> {
    if data.is_empty() {
        return Err(Error::Config("empty pretraining corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n_held = ((data.len() as f64) * cfg.heldout_fraction).round() as usize;
    let n_held = n_held.min(data.len() - 1);
    let (train, held) = data.split_at(data.len() - n_held);
    let score_held = |p: &Policy| -> Result<f64> {
        if held.is_empty() {
            Ok(f64::NAN)
        } else {
            p.mean_nll(held)
        }
    };
    let mut log = vec![PretrainLog {
        epoch: 0,
        train_nll: None,
        heldout_nll: score_held(policy)?,
    }];
    let mut opt = AdamW::new(rlfb_numerics::AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Labeled<'_>> = chunk.iter().map(|&i| train[i]).collect();
            total += policy.teacher_forced_step(&batch, &mut opt)?;
            batches += 1;
        }
        log.push(PretrainLog {
            epoch,
            train_nll: Some(total / batches as f64),
            heldout_nll: score_held(policy)?,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::StandardNormal;

    fn toy_policy(words: &[&str], seed: u64) -> Policy {
        let mut rng = stream(seed, "toy");
        let lex: Vec<Vec<f64>> = words
            .iter()
            .map(|_| (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let cfg = PolicyConfig {
            hidden: 8,
            max_words: 4,
            init_scale: 1.0,
        };
        Policy::with_words(
            words.iter().map(|w| w.to_string()).collect(),
            lex,
            2,
            4,
            &cfg,
            &mut rng,
        )
        .unwrap()
    }

    fn frames(rows: usize, dim: usize, seed: u64) -> Frames {
        let mut rng = stream(seed, "frames");
        Frames {
            rows,
            dim,
            data: (0..rows * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    #[test]
    fn step_distributions_normalize() {
        let p = toy_policy(&["a", "b", "c"], 1);
        let f = frames(4, 4, 2);
        for prefix in [vec![], vec![0], vec![2, 1]] {
            let lp = p.next_token_logprobs(&f, &prefix).unwrap();
            let s: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_head_gives_uniform_sequence_logprob() {
        let mut p = toy_policy(&["a", "b", "c"], 3);
        p.zero_output_head();
        let f = frames(6, 4, 4);
        let toks = vec![0, 2, 1, p.vocab().eos()];
        let lp = p.sequence_logprob(&f, &toks).unwrap();
        assert!((lp - 4.0 * (1.0f64 / 4.0).ln()).abs() < 1e-6);
    }

    #[test]
    fn single_token_inventory_is_certain() {
        let mut rng = stream(0, "empty");
        let cfg = PolicyConfig {
            hidden: 4,
            max_words: 2,
            init_scale: 1.0,
        };
        let p = Policy::with_words(Vec::new(), Vec::new(), 1, 3, &cfg, &mut rng).unwrap();
        let f = frames(1, 3, 0);
        assert_eq!(p.sequence_logprob(&f, &[p.vocab().eos()]).unwrap(), 0.0);
    }

    #[test]
    fn sequence_logprob_matches_teacher_forced_loss() {
        let mut p = toy_policy(&["a", "b", "c"], 5);
        let f = frames(4, 4, 6);
        let words: Vec<String> = vec!["b".into(), "a".into()];
        let toks = p.vocab().encode(&words).unwrap();
        let lp = p.sequence_logprob(&f, &toks).unwrap();
        let mut opt = AdamW::new(rlfb_numerics::AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        let before = p.checkpoint_id();
        let nll = p
            .teacher_forced_step(&[Labeled { frames: &f, words: &words }], &mut opt)
            .unwrap();
        assert!((lp + nll * toks.len() as f64).abs() < 1e-12);
        assert_eq!(p.checkpoint_id(), before);
    }

    #[test]
    fn end_of_audio_eos_score_only_touches_the_last_step() {
        let mut p = toy_policy(&["a", "b", "c"], 8);
        let f = frames(6, 4, 9);
        let toks = vec![0, 2, 1, p.vocab().eos()];
        let before = p.token_logprobs(&f, &toks).unwrap();
        let mut table = p.params.get(EOS_REM).clone();
        table.data_mut()[0] += 3.0;
        p.params.insert(EOS_REM, table);
        let after = p.token_logprobs(&f, &toks).unwrap();
        assert_eq!(before[..3], after[..3]);
        assert!(after[3] > before[3]);
    }

    #[test]
    fn unknown_token_is_a_data_error() {
        let mut p = toy_policy(&["a"], 1);
        let f = frames(2, 4, 1);
        let words = vec!["zz".to_string()];
        let mut opt = AdamW::new(Default::default());
        let err = p
            .teacher_forced_step(&[Labeled { frames: &f, words: &words }], &mut opt)
            .unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("zz")));
    }

    #[test]
    fn memorizes_one_utterance() {
        let mut p = toy_policy(&["a", "b", "c"], 7);
        let f = frames(4, 4, 8);
        let words: Vec<String> = vec!["c".into(), "a".into()];
        let mut opt = AdamW::new(rlfb_numerics::AdamWConfig {
            lr: 0.05,
            ..Default::default()
        });
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            last = p
                .teacher_forced_step(&[Labeled { frames: &f, words: &words }], &mut opt)
                .unwrap();
        }
        assert!(last < 0.01, "{last}");
        let g = p.greedy_decode(&f).unwrap();
        assert_eq!(p.vocab().decode(&g.tokens), words);
    }

    #[test]
    fn greedy_follows_stepwise_argmax() {
        let p = toy_policy(&["a", "b", "c", "d"], 9);
        let f = frames(6, 4, 10);
        let g = p.greedy_decode(&f).unwrap();
        assert_eq!(g, p.greedy_decode(&f).unwrap());
        let n_steps = g.tokens.len();
        for t in 0..n_steps {
            let lp = p.next_token_logprobs(&f, &g.tokens[..t]).unwrap();
            let (best, _) = argmax(&lp);
            assert_eq!(best, g.tokens[t]);
            assert_eq!(lp[best], g.per_token_logprob[t]);
        }
        if g.truncated {
            assert_eq!(n_steps, p.config().max_words);
        }
    }

    #[test]
    fn beam_hypotheses_are_distinct_and_rescored() {
        let p = toy_policy(&["a", "b", "c", "d", "e"], 11);
        let f = frames(6, 4, 12);
        let mut rng = stream(11, "beam");
        let nb = p.beam_sample("u", &f, &BeamConfig::default(), &mut rng).unwrap();
        assert!(!nb.hypotheses.is_empty() && nb.hypotheses.len() <= 8);
        for w in nb.hypotheses.windows(2) {
            assert!(w[0].total_logprob >= w[1].total_logprob);
        }
        let mut seen = std::collections::BTreeSet::new();
        for h in &nb.hypotheses {
            assert!(seen.insert(h.tokens.clone()));
            let lp = p.sequence_logprob(&f, &h.tokens).unwrap();
            assert!((lp - h.total_logprob).abs() < 1e-9);
        }
        assert_eq!(nb.meta.checkpoint_id, p.checkpoint_id());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = toy_policy(&["a", "b"], 13);
        let dir = tempfile::tempdir().unwrap();
        let id = p.save(dir.path()).unwrap();
        let q = Policy::load(dir.path()).unwrap();
        assert_eq!(q.checkpoint_id(), id);
        assert_eq!(q.vocab(), p.vocab());
    }
}
