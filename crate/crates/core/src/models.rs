//! Note language model, variational recurrent autoencoder and the
//! history-supported variant (VRASH).
//!
//! All three read the same concatenated note representation
//! (pitch-class, octave, delay and meta-label embeddings) and predict the
//! next note with three independent softmax heads. The end-of-track symbol
//! lives on the pitch head only.
//!
//! Cross-entropy is reported in nats per note: the summed head losses over
//! all note positions plus the pitch-head loss of the final end-of-track
//! prediction, divided by the number of notes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{softmax, AutodiffError, Cell, CellKind, CellState, Init, Linear, ParamId, ParameterStore, Result, RngStream, Tape, Var};
use crate::tokenizer::{TokenTrack, TokenizedNote, Vocab, EOS_PITCH, PITCH_CLASSES, PITCH_HEAD_SIZE};

pub const LATENT_DIM: usize = 16;
pub const PITCH_EMBED: usize = 16;
pub const OCTAVE_EMBED: usize = 8;
pub const DELAY_EMBED: usize = 16;
pub const META_EMBED: usize = 8;
/// Width of one note input vector.
pub const NOTE_INPUT: usize = PITCH_EMBED + OCTAVE_EMBED + DELAY_EMBED + META_EMBED;
pub const DEFAULT_HIDDEN: usize = 128;
pub const MAX_GENERATED_NOTES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Lm,
    Vae,
    Vrash,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Lm => "lm",
            ModelKind::Vae => "vae",
            ModelKind::Vrash => "vrash",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "lm" => Some(ModelKind::Lm),
            "vae" => Some(ModelKind::Vae),
            "vrash" => Some(ModelKind::Vrash),
            _ => None,
        }
    }

    pub fn is_variational(self) -> bool {
        !matches!(self, ModelKind::Lm)
    }

    /// LSTM for the language model, depth-2 highway cells otherwise.
    pub fn default_cell(self) -> CellKind {
        match self {
            ModelKind::Lm => CellKind::Lstm,
            _ => CellKind::Rhn { depth: 2 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Cell of the language model or of the decoder.
    pub cell: CellKind,
    pub encoder_cell: CellKind,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            cell: kind.default_cell(),
            encoder_cell: kind.default_cell(),
            hidden: DEFAULT_HIDDEN,
        }
    }
}

/// Output sizes of the three heads plus the meta label count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSizes {
    pub octaves: usize,
    pub delays: usize,
    pub labels: usize,
    /// Absolute octave of octave-head index 0.
    pub octave_min: u8,
}

impl HeadSizes {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        HeadSizes {
            octaves: vocab.octave_count(),
            delays: vocab.delay_count(),
            labels: vocab.label_count().max(1),
            octave_min: vocab.octave_min,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Embeddings {
    pitch: ParamId,
    octave: ParamId,
    delay: ParamId,
    meta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Heads {
    pitch: Linear,
    octave: Linear,
    delay: Linear,
}

#[derive(Debug, Clone)]
struct Encoder {
    cell: Cell,
    mu: Linear,
    logvar: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    emb: Embeddings,
    cell: Cell,
    heads: Heads,
    encoder: Option<Encoder>,
    init_state: Option<Linear>,
}

/// Per-step logits of the three heads.
#[derive(Debug, Clone, Copy)]
pub struct ThreeHeadLogits {
    pub pitch: Var,
    pub octave: Var,
    pub delay: Var,
}

/// Mean, log-variance and the sampled code of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

/// How the latent code is chosen during a teacher-forced pass.
#[derive(Debug)]
pub enum LatentMode<'r> {
    /// `z = mu`; used for evaluation.
    Mean,
    /// Reparameterized sample with noise from the stream.
    Sample(&'r mut RngStream),
}

/// Options for a teacher-forced pass over one track.
#[derive(Debug)]
pub struct PassOptions<'r> {
    pub beta: f64,
    pub latent: LatentMode<'r>,
    /// Probability of zeroing each history input of the VRASH decoder.
    pub history_dropout: f64,
}

impl PassOptions<'_> {
    /// Noise-free evaluation at full KL weight.
    pub fn eval() -> Self {
        PassOptions {
            beta: 1.0,
            latent: LatentMode::Mean,
            history_dropout: 0.0,
        }
    }
}

/// Result of a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct TrackLoss {
    /// `(recon_sum + beta * kl) / notes`, the training objective.
    pub objective: Var,
    /// `recon_sum + beta * kl`.
    pub total: Var,
    pub recon_sum: f64,
    pub head_sums: [f64; 3],
    pub kl: f64,
    pub notes: usize,
    /// Positions where every relevant head's argmax equals the target.
    pub correct: usize,
    /// Predicted positions (`notes + 1`).
    pub positions: usize,
    pub latent: Option<LatentCode>,
}

impl TrackLoss {
    pub fn recon_per_note(&self) -> f64 {
        self.recon_sum / self.notes as f64
    }
}

/// A sampled symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampled {
    Note(TokenizedNote),
    Eos,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub sizes: HeadSizes,
    pub store: ParameterStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, sizes: HeadSizes, rng: &mut RngStream) -> Result<Self> {
        let mut store = ParameterStore::new();
        let s = &mut store;
        let emb = Embeddings {
            // 12 pitch classes + BOS + EOS rows
            pitch: s.add("emb.pitch", PITCH_CLASSES + 2, PITCH_EMBED, Init::Glorot, rng)?,
            octave: s.add("emb.octave", sizes.octaves + 1, OCTAVE_EMBED, Init::Glorot, rng)?,
            delay: s.add("emb.delay", sizes.delays + 1, DELAY_EMBED, Init::Glorot, rng)?,
            meta: s.add("emb.meta", sizes.labels, META_EMBED, Init::Glorot, rng)?,
        };
        let h = config.hidden;
        let input = match config.kind {
            ModelKind::Lm => NOTE_INPUT,
            _ => LATENT_DIM + NOTE_INPUT,
        };
        let cell = Cell::new(config.cell, s, rng, "dec.cell", input, h)?;
        let heads = Heads {
            pitch: Linear::new(s, rng, "head.pitch", h, PITCH_HEAD_SIZE)?,
            octave: Linear::new(s, rng, "head.octave", h, sizes.octaves)?,
            delay: Linear::new(s, rng, "head.delay", h, sizes.delays)?,
        };
        let (encoder, init_state) = if config.kind.is_variational() {
            let ecell = Cell::new(config.encoder_cell, s, rng, "enc.cell", NOTE_INPUT, h)?;
            let enc = Encoder {
                cell: ecell,
                mu: Linear::new(s, rng, "enc.mu", h, LATENT_DIM)?,
                logvar: Linear::new(s, rng, "enc.logvar", h, LATENT_DIM)?,
            };
            (Some(enc), Some(Linear::new(s, rng, "dec.init", LATENT_DIM, h)?))
        } else {
            (None, None)
        };
        Ok(Model {
            config,
            sizes,
            store,
            layout: Layout {
                emb,
                cell,
                heads,
                encoder,
                init_state,
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Replace parameter values by name; every name and shape must match.
    pub fn load_parameters(&mut self, params: &[(String, (usize, usize), Vec<f64>)]) -> core::result::Result<(), String> {
        if params.len() != self.store.len() {
            return Err(format!("expected {} parameters, found {}", self.store.len(), params.len()));
        }
        for (name, shape, values) in params {
            let id = self.store.id(name).ok_or_else(|| format!("unknown parameter {name}"))?;
            if self.store.shape(id) != *shape || values.len() != shape.0 * shape.1 {
                return Err(format!("shape mismatch for {name}"));
            }
            self.store.value_mut(id).copy_from_slice(values);
        }
        Ok(())
    }

    /// Input vector for a note, or for BOS when `note` is `None`.
    pub fn note_input(&self, tape: &mut Tape<'_>, note: Option<&TokenizedNote>, meta: usize) -> Result<Var> {
        let e = &self.layout.emb;
        let (pc, oct, delay) = match note {
            Some(n) => (
                usize::from(n.pitch_class),
                usize::from(n.octave_index.saturating_sub(self.sizes.octave_min)),
                n.delay_index,
            ),
            None => (PITCH_CLASSES, self.sizes.octaves, self.sizes.delays),
        };
        let tables = (tape.param(e.pitch), tape.param(e.octave), tape.param(e.delay), tape.param(e.meta));
        let p = tape.embed(tables.0, pc)?;
        let o = tape.embed(tables.1, oct)?;
        let d = tape.embed(tables.2, delay)?;
        let m = tape.embed(tables.3, meta)?;
        let po = tape.concat(p, o)?;
        let pod = tape.concat(po, d)?;
        tape.concat(pod, m)
    }

    fn heads(&self, tape: &mut Tape<'_>, h: Var) -> Result<ThreeHeadLogits> {
        let hd = &self.layout.heads;
        Ok(ThreeHeadLogits {
            pitch: hd.pitch.forward(tape, h)?,
            octave: hd.octave.forward(tape, h)?,
            delay: hd.delay.forward(tape, h)?,
        })
    }

    pub fn initial_state(&self, tape: &mut Tape<'_>, z: Option<Var>) -> Result<CellState> {
        match (self.layout.init_state, z) {
            (Some(lin), Some(z)) => {
                let h = lin.forward(tape, z)?;
                Ok(self.layout.cell.state_from(tape, h))
            }
            _ => Ok(self.layout.cell.zero_state(tape)),
        }
    }

    /// One language-model step from the previous note input.
    pub fn lm_step(&self, tape: &mut Tape<'_>, prev: Var, state: CellState) -> Result<(ThreeHeadLogits, CellState)> {
        let state = self.layout.cell.step(tape, prev, state)?;
        Ok((self.heads(tape, state.h)?, state))
    }

    /// One VAE decoder step; the only per-step input besides `z` is the
    /// constant BOS token.
    pub fn vae_decode_step(&self, tape: &mut Tape<'_>, z: Var, meta: usize, state: CellState) -> Result<(ThreeHeadLogits, CellState)> {
        let token = self.note_input(tape, None, meta)?;
        let x = tape.concat(z, token)?;
        let state = self.layout.cell.step(tape, x, state)?;
        Ok((self.heads(tape, state.h)?, state))
    }

    /// One VRASH decoder step. With `drop_history` the history input is
    /// replaced by zeros.
    pub fn vrash_decode_step(&self, tape: &mut Tape<'_>, z: Var, prev: Var, drop_history: bool, state: CellState) -> Result<(ThreeHeadLogits, CellState)> {
        let prev = if drop_history { tape.zeros(1, NOTE_INPUT) } else { prev };
        let x = tape.concat(z, prev)?;
        let state = self.layout.cell.step(tape, x, state)?;
        Ok((self.heads(tape, state.h)?, state))
    }

    /// Run the encoder over the whole track; returns `(mu, logvar)`.
    pub fn encode(&self, tape: &mut Tape<'_>, track: &TokenTrack) -> Result<(Var, Var)> {
        let enc = self
            .layout
            .encoder
            .as_ref()
            .ok_or(AutodiffError::Unsupported("language model has no encoder"))?;
        let mut state = enc.cell.zero_state(tape);
        for n in &track.notes {
            let x = self.note_input(tape, Some(n), track.meta)?;
            state = enc.cell.step(tape, x, state)?;
        }
        Ok((enc.mu.forward(tape, state.h)?, enc.logvar.forward(tape, state.h)?))
    }

    /// Teacher-forced pass over one track.
    pub fn track_loss(&self, tape: &mut Tape<'_>, track: &TokenTrack, opts: &mut PassOptions<'_>) -> Result<TrackLoss> {
        let n = track.notes.len();
        assert!(n >= 1, "track must contain at least one note");
        let kind = self.config.kind;

        let mut latent = None;
        let mut kl_var = None;
        let mut z = None;
        if kind.is_variational() {
            let (mu, logvar) = self.encode(tape, track)?;
            let zv = match &mut opts.latent {
                LatentMode::Mean => mu,
                LatentMode::Sample(rng) => {
                    let eps: Vec<f64> = (0..LATENT_DIM).map(|_| rng.normal()).collect();
                    reparameterize(tape, mu, logvar, &eps)?
                }
            };
            latent = Some(LatentCode {
                mu: tape.value(mu).to_vec(),
                logvar: tape.value(logvar).to_vec(),
                z: tape.value(zv).to_vec(),
            });
            kl_var = Some(kl_divergence(tape, mu, logvar)?);
            z = Some(zv);
        }

        let mut state = self.initial_state(tape, z)?;
        let mut terms: Vec<Var> = Vec::with_capacity(3 * n + 1);
        let mut head_sums = [0.0f64; 3];
        let mut correct = 0;
        let mut prev = self.note_input(tape, None, track.meta)?;

        for t in 0..=n {
            let (logits, next) = match kind {
                ModelKind::Lm => self.lm_step(tape, prev, state)?,
                ModelKind::Vae => self.vae_decode_step(tape, z.unwrap(), track.meta, state)?,
                ModelKind::Vrash => {
                    let drop = match &mut opts.latent {
                        LatentMode::Sample(rng) => rng.bernoulli(opts.history_dropout),
                        LatentMode::Mean => opts.history_dropout >= 1.0,
                    };
                    self.vrash_decode_step(tape, z.unwrap(), prev, drop, state)?
                }
            };
            state = next;
            let pitch_target = track.notes.get(t).map_or(EOS_PITCH, |n| usize::from(n.pitch_class));
            let ce = tape.softmax_cross_entropy(logits.pitch, pitch_target)?;
            head_sums[0] += tape.scalar(ce);
            terms.push(ce);
            let mut hit = argmax(tape.value(logits.pitch)) == pitch_target;
            if let Some(note) = track.notes.get(t) {
                let oct = usize::from(note.octave_index - self.sizes.octave_min);
                let ce = tape.softmax_cross_entropy(logits.octave, oct)?;
                head_sums[1] += tape.scalar(ce);
                terms.push(ce);
                let ce = tape.softmax_cross_entropy(logits.delay, note.delay_index)?;
                head_sums[2] += tape.scalar(ce);
                terms.push(ce);
                hit &= argmax(tape.value(logits.octave)) == oct && argmax(tape.value(logits.delay)) == note.delay_index;
                if t < n {
                    prev = self.note_input(tape, Some(note), track.meta)?;
                }
            }
            if hit {
                correct += 1;
            }
        }

        let mut recon = terms[0];
        for &term in &terms[1..] {
            recon = tape.add(recon, term)?;
        }
        let recon_sum = tape.scalar(recon);
        let (total, kl) = match kl_var {
            Some(k) => {
                let weighted = tape.scale(k, opts.beta);
                (tape.add(recon, weighted)?, tape.scalar(k))
            }
            None => (recon, 0.0),
        };
        let objective = tape.scale(total, 1.0 / n as f64);
        Ok(TrackLoss {
            objective,
            total,
            recon_sum,
            head_sums,
            kl,
            notes: n,
            correct,
            positions: n + 1,
            latent,
        })
    }

    /// Noise-free latent mean and log-variance for a track.
    pub fn latent_mean(&self, track: &TokenTrack) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(&self.store);
        let (mu, logvar) = self.encode(&mut tape, track)?;
        Ok((tape.value(mu).to_vec(), tape.value(logvar).to_vec()))
    }

    /// Autoregressive generation.
    ///
    /// `z` is required for the variational models. `temperature` of `None`
    /// means greedy (argmax) decoding. End-of-track is masked on the first
    /// step so every track has at least one note.
    pub fn generate(&self, z: Option<&[f64]>, meta: usize, temperature: Option<f64>, rng: &mut RngStream, max_notes: usize) -> Result<Vec<TokenizedNote>> {
        let mut tape = Tape::new(&self.store);
        let zv = match (self.config.kind.is_variational(), z) {
            (true, Some(z)) => Some(tape.row(z)),
            (true, None) => {
                let draw: Vec<f64> = (0..LATENT_DIM).map(|_| rng.normal()).collect();
                Some(tape.row(&draw))
            }
            (false, _) => None,
        };
        let mut state = self.initial_state(&mut tape, zv)?;
        let mut prev = self.note_input(&mut tape, None, meta)?;
        let mut out = Vec::new();
        while out.len() < max_notes.min(MAX_GENERATED_NOTES) {
            let (logits, next) = match self.config.kind {
                ModelKind::Lm => self.lm_step(&mut tape, prev, state)?,
                ModelKind::Vae => self.vae_decode_step(&mut tape, zv.unwrap(), meta, state)?,
                ModelKind::Vrash => self.vrash_decode_step(&mut tape, zv.unwrap(), prev, false, state)?,
            };
            state = next;
            let mut pitch = tape.value(logits.pitch).to_vec();
            if out.is_empty() {
                pitch[EOS_PITCH] = f64::NEG_INFINITY;
            }
            let values = HeadValues {
                pitch,
                octave: tape.value(logits.octave).to_vec(),
                delay: tape.value(logits.delay).to_vec(),
            };
            match sample_note(&values, temperature, rng, &self.sizes) {
                Sampled::Eos => break,
                Sampled::Note(note) => {
                    out.push(note);
                    prev = self.note_input(&mut tape, Some(&note), meta)?;
                }
            }
        }
        Ok(out)
    }
}

/// `z = mu + exp(logvar / 2) * eps` with `eps` held constant.
pub fn reparameterize(tape: &mut Tape<'_>, mu: Var, logvar: Var, eps: &[f64]) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.leaf(1, eps.len(), eps.to_vec());
    let scaled = tape.mul(std, noise)?;
    tape.add(mu, scaled)
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_divergence(tape: &mut Tape<'_>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let a = tape.sub(logvar, mu2)?;
    let b = tape.sub(a, var)?;
    let c = tape.add_scalar(b, 1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, -0.5))
}

/// Plain logits of the three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    pub pitch: Vec<f64>,
    pub octave: Vec<f64>,
    pub delay: Vec<f64>,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draw an index from `softmax(logits / temperature)`.
pub fn sample_index(logits: &[f64], temperature: f64, rng: &mut RngStream) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let probs = softmax(&scaled);
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just under 1: take the last index with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Sample each head independently; `None` temperature means argmax.
pub fn sample_note(logits: &HeadValues, temperature: Option<f64>, rng: &mut RngStream, sizes: &HeadSizes) -> Sampled {
    let pick = |xs: &[f64], rng: &mut RngStream| match temperature {
        Some(t) if t > 0.0 => sample_index(xs, t, rng),
        _ => argmax(xs),
    };
    let pc = pick(&logits.pitch, rng);
    let oct = pick(&logits.octave, rng);
    let delay = pick(&logits.delay, rng);
    if pc == EOS_PITCH {
        return Sampled::Eos;
    }
    let mut octave_index = sizes.octave_min + oct as u8;
    while 12 * u16::from(octave_index) + pc as u16 > 127 {
        octave_index -= 1;
    }
    Sampled::Note(TokenizedNote {
        pitch_class: pc as u8,
        octave_index,
        delay_index: delay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{check_inputs, DEFAULT_EPS};

    fn sizes() -> HeadSizes {
        HeadSizes {
            octaves: 11,
            delays: 32,
            labels: 2,
            octave_min: 0,
        }
    }

    fn small(kind: ModelKind, hidden: usize, seed: u64) -> Model {
        let mut cfg = ModelConfig::new(kind);
        cfg.hidden = hidden;
        Model::new(cfg, sizes(), &mut RngStream::new(seed)).unwrap()
    }

    fn track(len: usize, seed: u64) -> TokenTrack {
        let mut rng = RngStream::new(seed);
        let notes = (0..len)
            .map(|_| TokenizedNote {
                pitch_class: rng.below(12) as u8,
                octave_index: 4 + rng.below(3) as u8,
                delay_index: rng.below(4),
            })
            .collect();
        TokenTrack {
            source: String::from("t"),
            meta: 1,
            notes,
        }
    }

    #[test]
    fn zero_weights_give_uniform_heads() {
        let baseline = 13f64.ln() + 11f64.ln() + 32f64.ln();
        for kind in [ModelKind::Lm, ModelKind::Vae, ModelKind::Vrash] {
            let mut m = small(kind, 8, 3);
            m.store.zero_all();
            let t = track(20, 1);
            let mut tape = Tape::new(&m.store);
            let loss = m.track_loss(&mut tape, &t, &mut PassOptions::eval()).unwrap();
            let expected = baseline + 13f64.ln() / 20.0;
            assert!((loss.recon_per_note() - expected).abs() < 1e-9, "{kind:?}");
            assert!(loss.kl.abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_models_near_uniform() {
        let baseline = 13f64.ln() + 11f64.ln() + 32f64.ln();
        for (i, kind) in [ModelKind::Lm, ModelKind::Vae, ModelKind::Vrash].into_iter().enumerate() {
            let m = small(kind, DEFAULT_HIDDEN, 10 + i as u64);
            let t = track(32, 7);
            let mut tape = Tape::new(&m.store);
            let loss = m.track_loss(&mut tape, &t, &mut PassOptions::eval()).unwrap();
            let rel = (loss.recon_per_note() - baseline).abs() / baseline;
            assert!(rel < 0.05, "{kind:?}: {}", loss.recon_per_note());
        }
    }

    #[test]
    fn reparameterize_examples() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let mu = tape.row(&[0.0, 1.0]);
        let lv = tape.row(&[0.0, 2f64.ln() * 2.0]);
        let z = reparameterize(&mut tape, mu, lv, &[1.0, -0.5]).unwrap();
        let v = tape.value(z);
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_gradients() {
        let store = ParameterStore::new();
        let eps = [0.3, -1.2, 0.7];
        let mu = [0.1, -0.4, 2.0];
        let lv = [-0.5, 0.2, 1.1];
        let mut tape = Tape::new(&store);
        let m = tape.row(&mu);
        let l = tape.row(&lv);
        let z = reparameterize(&mut tape, m, l, &eps).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        let zv = tape.value(z).to_vec();
        for i in 0..3 {
            assert!((g.get(m).unwrap()[i] - 1.0).abs() < 1e-12);
            assert!((g.get(l).unwrap()[i] - 0.5 * (zv[i] - mu[i])).abs() < 1e-12);
        }
        let rep = check_inputs(&store, &[(1, 3, mu.to_vec()), (1, 3, lv.to_vec())], DEFAULT_EPS, |t, v| {
            let z = reparameterize(t, v[0], v[1], &eps)?;
            let z2 = t.mul(z, z)?;
            Ok(t.sum(z2))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.row(&[0.0; 4]);
        let k = kl_divergence(&mut tape, z, z).unwrap();
        assert_eq!(tape.scalar(k), 0.0);
        let mu = tape.row(&[1.0]);
        let lv = tape.row(&[0.0]);
        let k = kl_divergence(&mut tape, mu, lv).unwrap();
        assert!((tape.scalar(k) - 0.5).abs() < 1e-15);
        let mut rng = RngStream::new(5);
        for _ in 0..100 {
            let mu: Vec<f64> = (0..4).map(|_| rng.normal() * 2.0).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.normal() * 2.0).collect();
            let a = tape.row(&mu);
            let b = tape.row(&lv);
            let k = kl_divergence(&mut tape, a, b).unwrap();
            assert!(tape.scalar(k) >= 0.0);
        }
    }

    #[test]
    fn total_derivative_in_beta_is_kl() {
        let m = small(ModelKind::Vae, 8, 2);
        let t = track(10, 4);
        let value = |beta: f64| {
            let mut tape = Tape::new(&m.store);
            let mut o = PassOptions::eval();
            o.beta = beta;
            let l = m.track_loss(&mut tape, &t, &mut o).unwrap();
            (tape.scalar(l.total), l.kl)
        };
        let h = 1e-4;
        let (up, kl) = value(0.5 + h);
        let (down, _) = value(0.5 - h);
        assert!(((up - down) / (2.0 * h) - kl).abs() < 1e-6);
    }

    #[test]
    fn full_history_dropout_ignores_history() {
        let m = small(ModelKind::Vrash, 16, 9);
        let mut tape = Tape::new(&m.store);
        let z = tape.row(&[0.25; LATENT_DIM]);
        let a = m.note_input(&mut tape, Some(&track(1, 1).notes[0]), 0).unwrap();
        let b = m.note_input(&mut tape, Some(&track(1, 2).notes[0]), 1).unwrap();
        let s0 = m.initial_state(&mut tape, Some(z)).unwrap();
        let (la, _) = m.vrash_decode_step(&mut tape, z, a, true, s0).unwrap();
        let (lb, _) = m.vrash_decode_step(&mut tape, z, b, true, s0).unwrap();
        let (lc, _) = m.vrash_decode_step(&mut tape, z, b, false, s0).unwrap();
        for (x, y) in [(la.pitch, lb.pitch), (la.octave, lb.octave), (la.delay, lb.delay)] {
            let (x, y) = (tape.value(x), tape.value(y));
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_ne!(tape.value(la.pitch), tape.value(lc.pitch));
    }

    #[test]
    fn greedy_sampling_and_octave_clamp() {
        let s = HeadSizes {
            octaves: 3,
            delays: 4,
            labels: 1,
            octave_min: 9,
        };
        let mut rng = RngStream::new(0);
        let mut v = HeadValues {
            pitch: vec![0.0; 13],
            octave: vec![0.0, 0.0, 5.0],
            delay: vec![0.0, 3.0, 0.0, 0.0],
        };
        v.pitch[11] = 4.0;
        // 12 * 11 + 11 = 143 > 127, so the octave comes down to 9
        assert_eq!(
            sample_note(&v, None, &mut rng, &s),
            Sampled::Note(TokenizedNote {
                pitch_class: 11,
                octave_index: 9,
                delay_index: 1,
            })
        );
        v.pitch[EOS_PITCH] = 10.0;
        assert_eq!(sample_note(&v, None, &mut rng, &s), Sampled::Eos);
        assert_eq!(sample_index(&[0.0, f64::NEG_INFINITY, 0.0], 1.0, &mut rng) != 1, true);
        assert_eq!(sample_index(&[-1e9, 50.0, 0.0], 0.5, &mut rng), 1);
    }

    #[test]
    fn generation_respects_limits() {
        for kind in [ModelKind::Lm, ModelKind::Vae, ModelKind::Vrash] {
            let m = small(kind, 8, 1);
            let mut rng = RngStream::new(3);
            let notes = m.generate(None, 0, Some(1.0), &mut rng, 40).unwrap();
            assert!(!notes.is_empty() && notes.len() <= 40);
            assert!(notes.iter().all(|n| n.pitch() <= 127));
        }
    }

    #[test]
    fn lm_has_no_encoder() {
        let m = small(ModelKind::Lm, 4, 0);
        assert!(m.latent_mean(&track(3, 0)).is_err());
    }
}
