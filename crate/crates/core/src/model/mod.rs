//! Decoder-only transformer over the shared vocabulary.
//!
//! Pre-LN blocks, learned absolute positions, untied output projection.
//! Several sequences can be packed into one forward pass; attention never
//! crosses sequence boundaries, so packing is equivalent to running them
//! one by one.

mod checkpoint;
pub mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use checkpoint::{ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Filled from the vocabulary when left at 0.
    pub vocab_size: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 512,
            vocab_size: 0,
            dropout: 0.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be > 0")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Named parameter tensors plus gradient buffers of the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParameterStore {
    fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.grads.push(Tensor::zeros(value.rows, value.cols));
        self.values.push(value);
        self.names.push(name);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.values[slot]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grad(&self, slot: usize) -> &Tensor {
        &self.grads[slot]
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Mutable access to values and gradients together, for optimizers.
    pub fn values_and_grads_mut(&mut self) -> (&mut [Tensor], &mut [Tensor]) {
        (&mut self.values, &mut self.grads)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `scale * g` for every parameter gradient recorded on the tape.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (slot, g) in grads.params() {
            for (a, b) in self.grads[slot].data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    /// Name of the first parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.values
            .iter()
            .position(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|i| self.names[i].as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    tok: usize,
    pos: usize,
    layers: Vec<LayerSlots>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

/// Parameter names and shapes in canonical order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![
        ("tok_emb".to_string(), v, d),
        ("pos_emb".to_string(), cfg.max_seq_len, d),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1_g"), 1, d),
            (p("ln1_b"), 1, d),
            (p("wq"), d, d),
            (p("bq"), 1, d),
            (p("wk"), d, d),
            (p("bk"), 1, d),
            (p("wv"), d, d),
            (p("bv"), 1, d),
            (p("wo"), d, d),
            (p("bo"), 1, d),
            (p("ln2_g"), 1, d),
            (p("ln2_b"), 1, d),
            (p("w1"), d, f),
            (p("b1"), 1, f),
            (p("w2"), f, d),
            (p("b2"), 1, d),
        ]);
    }
    out.extend([
        ("lnf_g".to_string(), 1, d),
        ("lnf_b".to_string(), 1, d),
        ("w_out".to_string(), d, v),
        ("b_out".to_string(), 1, v),
    ]);
    out
}

fn slots_for(cfg: &ModelConfig) -> Slots {
    // Slot numbers follow `layout`.
    let mut next = 0usize;
    let mut take = || {
        next += 1;
        next - 1
    };
    let tok = take();
    let pos = take();
    let layers = (0..cfg.n_layers)
        .map(|_| LayerSlots {
            ln1_g: take(),
            ln1_b: take(),
            wq: take(),
            bq: take(),
            wk: take(),
            bk: take(),
            wv: take(),
            bv: take(),
            wo: take(),
            bo: take(),
            ln2_g: take(),
            ln2_b: take(),
            w1: take(),
            b1: take(),
            w2: take(),
            b2: take(),
        })
        .collect();
    Slots {
        tok,
        pos,
        layers,
        lnf_g: take(),
        lnf_b: take(),
        w_out: take(),
        b_out: take(),
    }
}

/// Token ids of several sequences laid end to end.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedBatch {
    ids: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<(usize, usize)>,
}

impl PackedBatch {
    pub fn new() -> Self {
        PackedBatch::default()
    }

    pub fn single(ids: &[usize]) -> Self {
        let mut b = PackedBatch::new();
        b.push(ids);
        b
    }

    /// Appends a sequence and returns the packed row of its first token.
    pub fn push(&mut self, ids: &[usize]) -> usize {
        let start = self.ids.len();
        self.ids.extend_from_slice(ids);
        self.positions.extend(0..ids.len());
        self.segments.push((start, ids.len()));
        start
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_sequences(&self) -> usize {
        self.segments.len()
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    params: ParameterStore,
    slots: Slots,
}

impl Transformer {
    /// Freshly initialized model: N(0, 0.02) embeddings, Xavier-normal
    /// weights, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParameterStore::new();
        for (name, rows, cols) in layout(&config) {
            let base = name.rsplit('.').next().unwrap_or(&name);
            let t = if base.ends_with("_emb") {
                normal_tensor(&mut rng, rows, cols, 0.02)
            } else if base.starts_with('w') {
                normal_tensor(&mut rng, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
            } else if base.ends_with("_g") {
                Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
            } else {
                Tensor::zeros(rows, cols)
            };
            params.push(name, t);
        }
        let slots = slots_for(&config);
        Ok(Transformer { config, params, slots })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_parameters(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut params = ParameterStore::new();
        for ((name, rows, cols), (got_name, t)) in expected.into_iter().zip(named) {
            if name != got_name || (rows, cols) != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{got_name}` {}x{} does not match expected `{name}` {rows}x{cols}",
                    t.rows, t.cols
                )));
            }
            params.push(name, t);
        }
        let slots = slots_for(&config);
        Ok(Transformer { config, params, slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns logits for the packed
    /// rows listed in `rows`, one output row each. Dropout is applied only
    /// when `rng` is given and the configured rate is positive.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &PackedBatch,
        rows: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        for &(start, len) in &batch.segments {
            self.check_ids(&batch.ids[start..start + len])?;
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= batch.len()) {
            return Err(Error::Invalid(format!("output row {bad} outside packed batch of {}", batch.len())));
        }
        let p = |tape: &mut Tape, slot: usize| tape.param(slot, self.params.values[slot].clone());
        let s = &self.slots;
        let heads = self.config.n_heads;
        let rate = self.config.dropout;

        let drop = |tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>| -> Var {
            match rng {
                Some(r) if rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let n = tape.value(x).data.len();
                    let mask = (0..n)
                        .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    tape.dropout(x, mask)
                }
                _ => x,
            }
        };

        let tok = p(tape, s.tok);
        let pos = p(tape, s.pos);
        let te = tape.gather(tok, &batch.ids)?;
        let pe = tape.gather(pos, &batch.positions)?;
        let mut h = tape.add(te, pe);
        h = drop(tape, h, &mut rng);

        for l in &s.layers {
            let (g, b) = (p(tape, l.ln1_g), p(tape, l.ln1_b));
            let x = tape.layer_norm(h, g, b);
            let q = self.linear(tape, x, l.wq, l.bq);
            let k = self.linear(tape, x, l.wk, l.bk);
            let v = self.linear(tape, x, l.wv, l.bv);
            let a = tape.causal_attention(q, k, v, heads, &batch.segments);
            let a = self.linear(tape, a, l.wo, l.bo);
            let a = drop(tape, a, &mut rng);
            h = tape.add(h, a);

            let (g, b) = (p(tape, l.ln2_g), p(tape, l.ln2_b));
            let x = tape.layer_norm(h, g, b);
            let m = self.linear(tape, x, l.w1, l.b1);
            let m = tape.gelu(m);
            let m = self.linear(tape, m, l.w2, l.b2);
            let m = drop(tape, m, &mut rng);
            h = tape.add(h, m);
        }

        let sel = tape.select_rows(h, rows);
        let (g, b) = (p(tape, s.lnf_g), p(tape, s.lnf_b));
        let x = tape.layer_norm(sel, g, b);
        Ok(self.linear(tape, x, s.w_out, s.b_out))
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: usize, b: usize) -> Var {
        let w = tape.param(w, self.params.values[w].clone());
        let b = tape.param(b, self.params.values[b].clone());
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Logits at every position, `len x vocab_size`, without dropout.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rows: Vec<usize> = (0..ids.len()).collect();
        let out = self.forward_on_tape(&mut tape, &PackedBatch::single(ids), &rows, None)?;
        Ok(tape.value(out).clone())
    }

    /// Logits at the final position only.
    pub fn forward_last(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty input sequence".into()));
        }
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, &PackedBatch::single(ids), &[ids.len() - 1], None)?;
        Ok(tape.value(out).data.clone())
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            vocab_size: 11,
            dropout: 0.0,
            init_seed: 5,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.d_model = 9;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.vocab_size = 0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn output_shape_and_errors() {
        let m = Transformer::new(tiny()).unwrap();
        let out = m.forward(&[1, 2, 3, 4]).unwrap();
        assert_eq!(out.shape(), (4, 11));
        assert!(matches!(m.forward(&[0; 13]), Err(Error::SequenceTooLong { len: 13, max: 12 })));
        assert!(matches!(m.forward(&[0, 11]), Err(Error::TokenOutOfRange { id: 11, size: 11 })));
        let last = m.forward_last(&[1, 2, 3, 4]).unwrap();
        assert_eq!(last.as_slice(), out.row(3));
    }

    #[test]
    fn future_tokens_do_not_change_earlier_logits() {
        let m = Transformer::new(tiny()).unwrap();
        let a = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward(&[1, 2, 3, 9, 0]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn packing_matches_separate_runs() {
        let m = Transformer::new(tiny()).unwrap();
        let s1 = [1, 2, 3];
        let s2 = [4, 5, 6, 7];
        let mut batch = PackedBatch::new();
        batch.push(&s1);
        let off = batch.push(&s2);
        let mut tape = Tape::new();
        let rows: Vec<usize> = (0..7).collect();
        let out = m.forward_on_tape(&mut tape, &batch, &rows, None).unwrap();
        let packed = tape.value(out);
        let a = m.forward(&s1).unwrap();
        let b = m.forward(&s2).unwrap();
        for r in 0..3 {
            for (x, y) in packed.row(r).iter().zip(a.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for r in 0..4 {
            for (x, y) in packed.row(off + r).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Transformer::new(tiny()).unwrap();
        let b = Transformer::new(tiny()).unwrap();
        assert_eq!(a.params(), b.params());
        let mut c = tiny();
        c.init_seed = 6;
        let c = Transformer::new(c).unwrap();
        assert_ne!(a.params().value(0), c.params().value(0));
        assert_eq!(a.params().names()[0], "tok_emb");
        assert!(a.params().first_non_finite().is_none());
    }

    #[test]
    fn sum_of_logits_gives_unit_bias_gradient() {
        let m = Transformer::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let batch = PackedBatch::single(&[1, 2, 3]);
        let logits = m.forward_on_tape(&mut tape, &batch, &[0, 1, 2], None).unwrap();
        let loss = tape.sum(logits);
        let g = tape.backward(loss).unwrap();
        let slot = m.params().slot("b_out").unwrap();
        let (_, gb) = g.params().find(|(s, _)| *s == slot).unwrap();
        assert!(gb.data.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn dropout_uses_rng_and_is_reproducible() {
        let mut c = tiny();
        c.dropout = 0.5;
        let m = Transformer::new(c).unwrap();
        let batch = PackedBatch::single(&[1, 2, 3]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let out = m.forward_on_tape(&mut tape, &batch, &[2], Some(&mut rng)).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        let eval = m.forward(&[1, 2, 3]).unwrap();
        assert_eq!(eval.row(2), m.forward(&[1, 2, 3]).unwrap().row(2));
    }
}
