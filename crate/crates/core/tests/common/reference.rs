//! Plain-f64 reference forward pass, written independently of the tape so
//! it can serve as an oracle for the model's outputs.

#![allow(dead_code)]

use mass_core::model::Transformer;

pub type Mat = Vec<Vec<f64>>;

pub struct Reference<'m> {
    model: &'m Transformer,
    d: usize,
    heads: usize,
}

fn rows(t: &mass_core::Tensor) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

impl<'m> Reference<'m> {
    pub fn new(model: &'m Transformer) -> Self {
        let c = model.config();
        Reference {
            model,
            d: c.model_dim,
            heads: c.heads,
        }
    }

    fn p(&self, name: &str) -> &mass_core::Tensor {
        self.model
            .params()
            .by_name(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = rows(self.p(&format!("{name}.weight")));
        let b = self.p(&format!("{name}.bias")).data();
        matmul(x, &w)
            .into_iter()
            .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
            .collect()
    }

    fn norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.p(&format!("{name}.gain")).data();
        let b = self.p(&format!("{name}.bias")).data();
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn attend(&self, q_in: &Mat, kv_in: &Mat, name: &str, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
        let q = self.linear(q_in, &format!("{name}.q"));
        let k = self.linear(kv_in, &format!("{name}.k"));
        let v = self.linear(kv_in, &format!("{name}.v"));
        let dh = self.d / self.heads;
        let mut joined = vec![vec![0.0; self.d]; q.len()];
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..q.len() {
                let scores: Vec<f64> = (0..k.len())
                    .map(|s| {
                        if allowed(t, s) {
                            q[t][cols.clone()]
                                .iter()
                                .zip(&k[s][cols.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let w: Vec<f64> = log_softmax(&scores).into_iter().map(f64::exp).collect();
                for c in cols.clone() {
                    joined[t][c] = (0..k.len()).map(|s| w[s] * v[s][c]).sum();
                }
            }
        }
        self.linear(&joined, &format!("{name}.out"))
    }

    fn ffn(&self, x: &Mat, name: &str) -> Mat {
        let h: Mat = self
            .linear(x, &format!("{name}.up"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        self.linear(&h, &format!("{name}.down"))
    }

    pub fn embed(&self, ids: &[usize], positions: &[usize], lang: usize) -> Mat {
        let tok = rows(self.p("embed.token"));
        let langs = rows(self.p("embed.language"));
        let learned = self.model.params().by_name("embed.position").map(rows);
        let scale = (self.d as f64).sqrt();
        ids.iter()
            .zip(positions)
            .map(|(&id, &p)| {
                let pos = match &learned {
                    Some(t) => t[p].clone(),
                    None => mass_core::model::sinusoid(p, self.d),
                };
                (0..self.d)
                    .map(|j| tok[id][j] * scale + pos[j] + langs[lang][j])
                    .collect()
            })
            .collect()
    }

    pub fn encode(&self, ids: &[usize], lang: usize) -> Mat {
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut x = self.embed(ids, &positions, lang);
        for l in 0..self.model.config().layers {
            let h = self.norm(&x, &format!("enc.{l}.attn_norm"));
            x = add(&x, &self.attend(&h, &h, &format!("enc.{l}.attn"), &|_, _| true));
            let h = self.norm(&x, &format!("enc.{l}.ffn_norm"));
            x = add(&x, &self.ffn(&h, &format!("enc.{l}.ffn")));
        }
        self.norm(&x, "enc.norm")
    }

    fn project(&self, h: &Mat) -> Mat {
        let bias = self.p("output.bias").data();
        let logits = match self.model.params().by_name("output.weight") {
            Some(w) => matmul(h, &rows(w)),
            None => {
                let tok = rows(self.p("embed.token"));
                h.iter()
                    .map(|r| tok.iter().map(|e| r.iter().zip(e).map(|(a, b)| a * b).sum()).collect())
                    .collect()
            }
        };
        logits
            .into_iter()
            .map(|r| r.iter().zip(bias).map(|(v, b)| v + b).collect())
            .collect()
    }

    /// Decoder logits; `allowed(t, s)` says whether query `t` sees key `s`.
    pub fn decode(
        &self,
        inputs: &[usize],
        positions: &[usize],
        memory: &Mat,
        lang: usize,
        allowed: &dyn Fn(usize, usize) -> bool,
    ) -> Mat {
        let mut x = self.embed(inputs, positions, lang);
        for l in 0..self.model.config().layers {
            let h = self.norm(&x, &format!("dec.{l}.self_norm"));
            x = add(&x, &self.attend(&h, &h, &format!("dec.{l}.self_attn"), allowed));
            let h = self.norm(&x, &format!("dec.{l}.cross_norm"));
            x = add(&x, &self.attend(&h, memory, &format!("dec.{l}.cross_attn"), &|_, _| true));
            let h = self.norm(&x, &format!("dec.{l}.ffn_norm"));
            x = add(&x, &self.ffn(&h, &format!("dec.{l}.ffn")));
        }
        self.project(&self.norm(&x, "dec.norm"))
    }

    /// Masked-token classifier: one query at `position`, whose
    /// self-attention over itself alone is just the output projection of
    /// its value vector.
    pub fn mlm_logits(&self, input: usize, position: usize, memory: &Mat, lang: usize) -> Vec<f64> {
        let mut x = self.embed(&[input], &[position], lang);
        for l in 0..self.model.config().layers {
            let h = self.norm(&x, &format!("dec.{l}.self_norm"));
            let v = self.linear(&h, &format!("dec.{l}.self_attn.v"));
            x = add(&x, &self.linear(&v, &format!("dec.{l}.self_attn.out")));
            let h = self.norm(&x, &format!("dec.{l}.cross_norm"));
            x = add(&x, &self.attend(&h, memory, &format!("dec.{l}.cross_attn"), &|_, _| true));
            let h = self.norm(&x, &format!("dec.{l}.ffn_norm"));
            x = add(&x, &self.ffn(&h, &format!("dec.{l}.ffn")));
        }
        self.project(&self.norm(&x, "dec.norm")).remove(0)
    }
}

/// Mean negative log-likelihood of `targets` (skipping `ignore`) under
/// row-wise `logits`.
pub fn mean_nll(logits: &Mat, targets: &[usize], ignore: usize) -> f64 {
    let picked: Vec<f64> = logits
        .iter()
        .zip(targets)
        .filter(|(_, &t)| t != ignore)
        .map(|(row, &t)| -log_softmax(row)[t])
        .collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}
