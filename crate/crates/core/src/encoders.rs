//! Toy visual and text encoders and their fusion into one multimodal vector.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Init, Tensor};

/// One synthetic input: an "image" feature vector, a token sequence, a class
/// label and optionally the knowledge-graph node the example is about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub image_features: Vec<f64>,
    pub token_ids: Vec<usize>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_node: Option<String>,
}

impl Example {
    pub fn validate(&self, d_i: usize, vocab: usize, classes: usize) -> Result<()> {
        if self.image_features.len() != d_i {
            return Err(shape_err("example", format!("image has {} features, expected {d_i}", self.image_features.len())));
        }
        if self.token_ids.is_empty() {
            return Err(Error::InvalidArgument("example has no tokens".into()));
        }
        if let Some(bad) = self.token_ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} out of range 0..{vocab}")));
        }
        if self.label >= classes {
            return Err(Error::InvalidArgument(format!("label {} out of range 0..{classes}", self.label)));
        }
        if self.image_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("example image"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextParams {
    /// `V x d_t` token embedding table.
    pub embed: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub visual: VisualParams,
    pub text: TextParams,
    pub fusion: FusionParams,
}

#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    pub embed: Var,
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub visual: AffineVars,
    pub text: TextVars,
    pub fusion: AffineVars,
}

impl EncoderParams {
    pub fn new(d_i: usize, vocab: usize, d_t: usize, d_m: usize, seed: u64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidArgument(format!("vocabulary size must be >= 2, got {vocab}")));
        }
        Ok(Self {
            visual: VisualParams {
                w: Tensor::create(&[d_i, d_m], Init::Xavier { seed })?,
                b: Tensor::create(&[d_m], Init::Zeros)?,
            },
            text: TextParams {
                // Zero rows: a token never seen in training adds nothing to `t`.
                embed: Tensor::create(&[vocab, d_t], Init::Zeros)?,
                w: Tensor::create(&[d_t, d_m], Init::Xavier { seed: seed.wrapping_add(2) })?,
                b: Tensor::create(&[d_m], Init::Zeros)?,
            },
            fusion: FusionParams {
                w: Tensor::create(&[2 * d_m, d_m], Init::Xavier { seed: seed.wrapping_add(3) })?,
                b: Tensor::create(&[d_m], Init::Zeros)?,
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.text.embed.rows()
    }
}

/// `v = tanh(I · W_v + b_v)`.
pub fn encode_visual(tape: &Tape, image: Var, p: &AffineVars) -> Result<Var> {
    let pre = tape.matmul(image, p.w)?;
    let pre = tape.add(pre, p.b)?;
    tape.tanh(pre)
}

/// `t = tanh(mean(E[tokens]) · W_t + b_t)`; only the rows of `E` named by
/// `tokens` receive gradient.
pub fn encode_text(tape: &Tape, tokens: &[usize], p: &TextVars) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("token sequence must be non-empty".into()));
    }
    let rows = tape.gather_rows(p.embed, tokens)?;
    let pooled = tape.mean_rows(rows)?;
    let pre = tape.matmul(pooled, p.w)?;
    let pre = tape.add(pre, p.b)?;
    tape.tanh(pre)
}

/// `m = tanh([v; t] · W_m + b_m)`.
pub fn fuse_multimodal(tape: &Tape, v: Var, t: Var, p: &AffineVars) -> Result<Var> {
    let (sv, st) = (tape.shape(v), tape.shape(t));
    if sv != st {
        return Err(shape_err("fuse_multimodal", format!("v {sv:?} vs t {st:?}")));
    }
    let joined = tape.concat(v, t)?;
    let pre = tape.matmul(joined, p.w)?;
    let pre = tape.add(pre, p.b)?;
    tape.tanh(pre)
}

/// Full multimodal path for one example.
pub fn encode_example(tape: &Tape, example: &Example, p: &EncoderVars) -> Result<Var> {
    let image = tape.constant_vec(example.image_features.clone());
    let v = encode_visual(tape, image, &p.visual)?;
    let t = encode_text(tape, &example.token_ids, &p.text)?;
    fuse_multimodal(tape, v, t, &p.fusion)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(tape: &Tape, w: Tensor, b: Tensor) -> AffineVars {
        AffineVars { w: tape.leaf(&w), b: tape.leaf(&b) }
    }

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], d).unwrap()
    }

    #[test]
    fn visual_zero_and_identity() {
        let tape = Tape::new();
        let p = affine(&tape, Tensor::create(&[2, 2], Init::Xavier { seed: 1 }).unwrap(), Tensor::zeros(&[2]));
        let img = tape.constant_vec(vec![0.0, 0.0]);
        let v = encode_visual(&tape, img, &p).unwrap();
        assert_eq!(&*tape.value(v), &[0.0, 0.0]);

        let p = affine(&tape, eye(2), Tensor::zeros(&[2]));
        let img = tape.constant_vec(vec![0.5, -0.5]);
        let v = encode_visual(&tape, img, &p).unwrap();
        assert_eq!(&*tape.value(v), &[0.5f64.tanh(), (-0.5f64).tanh()]);
    }

    fn text_vars(tape: &Tape) -> TextVars {
        let embed = Tensor::create(&[8, 3], Init::Xavier { seed: 3 }).unwrap().with_requires_grad(true);
        TextVars {
            embed: tape.leaf(&embed),
            w: tape.leaf(&Tensor::create(&[3, 2], Init::Xavier { seed: 4 }).unwrap()),
            b: tape.leaf(&Tensor::zeros(&[2])),
        }
    }

    #[test]
    fn text_is_bag_of_tokens() {
        let tape = Tape::new();
        let p = text_vars(&tape);
        let a = tape.value(encode_text(&tape, &[5, 5, 5], &p).unwrap()).to_vec();
        let b = tape.value(encode_text(&tape, &[5], &p).unwrap()).to_vec();
        // (x + x + x) / 3 may differ from x in the last bit
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let c = tape.value(encode_text(&tape, &[1, 2, 7], &p).unwrap()).to_vec();
        let d = tape.value(encode_text(&tape, &[7, 1, 2], &p).unwrap()).to_vec();
        for (x, y) in c.iter().zip(&d) {
            // summation order differs, so allow rounding
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let tape = Tape::new();
        let p = text_vars(&tape);
        let t = encode_text(&tape, &[1, 4], &p).unwrap();
        let loss = tape.sum(t).unwrap();
        let g = tape.backward(loss).unwrap();
        let ge = g.get(p.embed).unwrap();
        for row in 0..8 {
            let slice = &ge[row * 3..(row + 1) * 3];
            if row == 1 || row == 4 {
                assert!(slice.iter().any(|&v| v != 0.0));
            } else {
                assert!(slice.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn text_errors() {
        let tape = Tape::new();
        let p = text_vars(&tape);
        assert!(encode_text(&tape, &[], &p).is_err());
        assert!(encode_text(&tape, &[8], &p).is_err());
    }

    #[test]
    fn fusion_zero_and_isolated_input() {
        let tape = Tape::new();
        let v = tape.constant_vec(vec![0.0, 0.0]);
        let t = tape.constant_vec(vec![0.0, 0.0]);
        let p = affine(&tape, Tensor::create(&[4, 2], Init::Xavier { seed: 2 }).unwrap(), Tensor::zeros(&[2]));
        assert_eq!(&*tape.value(fuse_multimodal(&tape, v, t, &p).unwrap()), &[0.0, 0.0]);

        // rows 0..2 of W_m are I, rows 2..4 are zero: m = tanh(v) regardless of t
        let w = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = affine(&tape, w, Tensor::zeros(&[2]));
        let v = tape.constant_vec(vec![0.3, -0.8]);
        for tv in [vec![0.0, 0.0], vec![5.0, -2.0]] {
            let t = tape.constant_vec(tv);
            let m = fuse_multimodal(&tape, v, t, &p).unwrap();
            assert_eq!(&*tape.value(m), &[0.3f64.tanh(), (-0.8f64).tanh()]);
        }
        let short = tape.constant_vec(vec![1.0]);
        assert!(fuse_multimodal(&tape, v, short, &p).is_err());
    }

    #[test]
    fn example_validation() {
        let ex = Example { image_features: vec![0.0; 3], token_ids: vec![1], label: 0, gold_node: None };
        assert!(ex.validate(3, 4, 2).is_ok());
        assert!(ex.validate(2, 4, 2).is_err());
        assert!(ex.validate(3, 1, 2).is_err());
        let bad = Example { label: 5, ..ex.clone() };
        assert!(bad.validate(3, 4, 2).is_err());
        let empty = Example { token_ids: vec![], ..ex };
        assert!(empty.validate(3, 4, 2).is_err());
    }
}
