use serde_json::Value;

use crate::assignment::{argmax, compose_ups, upsample_features};
use crate::backbone::BackboneOutput;
use crate::error::{Error, Result};
use crate::numerics::nn::Linear;
use crate::numerics::{Bound, ParamStore, Tensor};

const NORM_TOL: f64 = 1e-6;
pub const DEFAULT_TOP_K: usize = 5;

/// Unit-norm class vectors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingSet {
    pub names: Vec<String>,
    /// `[C, D]`.
    pub vectors: Tensor<f64>,
    pub background: bool,
    pub top_k: usize,
}

impl ClassEmbeddingSet {
    pub fn new(names: Vec<String>, vectors: Tensor<f64>, background: bool, top_k: usize) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != names.len() || names.is_empty() {
            return Err(Error::dim("class_embeddings", format!("{} names for {:?}", names.len(), vectors.shape())));
        }
        for (c, name) in names.iter().enumerate() {
            let n = vectors.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(Error::Usage(format!("embedding '{name}' has norm {n}, expected 1")));
            }
        }
        Ok(ClassEmbeddingSet { names, vectors, background, top_k: top_k.max(1) })
    }

    /// Normalizes each row before building the set.
    pub fn normalized(names: Vec<String>, rows: &[Vec<f64>], background: bool, top_k: usize) -> Result<Self> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| l2_normalize(r)).collect();
        Self::new(names, Tensor::from_rows(&rows)?, background, top_k)
    }

    /// Parses `{"class": [floats], ...}`; vectors must already be unit norm.
    pub fn from_json(text: &str, background: bool, top_k: usize) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let obj = v.as_object().ok_or_else(|| Error::Format { offset: 0, msg: "embeddings must be a JSON object".into() })?;
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for (k, arr) in obj {
            let arr = arr.as_array().ok_or_else(|| Error::Format { offset: 0, msg: format!("'{k}' is not an array") })?;
            let row = arr
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| Error::Format { offset: 0, msg: format!("'{k}' has a non-numeric entry") }))
                .collect::<Result<Vec<_>>>()?;
            names.push(k.clone());
            rows.push(row);
        }
        if rows.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(Error::Format { offset: 0, msg: "embedding lengths differ".into() });
        }
        Self::new(names, Tensor::from_rows(&rows)?, background, top_k)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Image-side projection into the class-embedding space.
#[derive(Clone, Debug)]
pub struct ZeroShotHead {
    pub proj: Linear,
}

impl ZeroShotHead {
    pub fn new(store: &mut ParamStore, name: &str, d4: usize, d_embed: usize) -> Self {
        ZeroShotHead { proj: Linear::new(store, &format!("{name}.proj"), d4, d_embed, false) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotMap {
    /// Stride-4 labels: class `c` is stored as `c + 1`, 0 is background.
    pub labels: Vec<u32>,
    pub h: usize,
    pub w: usize,
    /// Image-level similarity per class, `0.5 * (pooled + max over tokens)`.
    pub blended: Vec<f64>,
    pub threshold: Option<f64>,
}

/// Mean plus population standard deviation of the `k` largest values.
pub fn background_threshold(blended: &[f64], k: usize) -> f64 {
    let mut v = blended.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.truncate(k.clamp(1, blended.len()));
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    mean + var.sqrt()
}

/// `0.5 * (pooled_c + max_i sim[i][c])` for every class.
pub fn blended_similarity(token_sim: &Tensor<f64>, pooled_sim: &[f64]) -> Vec<f64> {
    (0..token_sim.cols())
        .map(|c| {
            let mx = (0..token_sim.rows()).map(|i| token_sim.get2(i, c)).fold(f64::NEG_INFINITY, f64::max);
            0.5 * (pooled_sim[c] + mx)
        })
        .collect()
}

/// Labels from precomputed token similarities: `token_sim` is `[N4, C]`,
/// `pooled_sim` is `[C]`, `a_ups` lifts stage-4 rows to the patch grid.
pub fn zero_shot_labels(a_ups: &Tensor<f64>, token_sim: &Tensor<f64>, pooled_sim: &[f64], emb: &ClassEmbeddingSet, h: usize, w: usize) -> Result<ZeroShotMap> {
    if token_sim.cols() != emb.len() || pooled_sim.len() != emb.len() {
        return Err(Error::dim("zero_shot", "similarity columns differ from class count"));
    }
    let patch_sim = upsample_features(a_ups, token_sim)?;
    if patch_sim.rows() != h * w {
        return Err(Error::dim("zero_shot", format!("{} patches for a {h}x{w} grid", patch_sim.rows())));
    }
    let blended = blended_similarity(token_sim, pooled_sim);
    let threshold = emb.background.then(|| background_threshold(&blended, emb.top_k));
    let labels = (0..patch_sim.rows())
        .map(|i| {
            let row = patch_sim.row(i);
            let c = argmax(row);
            match threshold {
                Some(t) if row[c] < t => 0,
                _ => c as u32 + 1,
            }
        })
        .collect();
    Ok(ZeroShotMap { labels, h, w, blended, threshold })
}

/// Projected, L2-normalized final tokens scored against the class set and
/// lifted to the patch grid.
pub fn zero_shot_segment(head: &ZeroShotHead, store: &ParamStore, out: &BackboneOutput, emb: &ClassEmbeddingSet) -> Result<ZeroShotMap> {
    if head.proj.d_out != emb.dim() {
        return Err(Error::dim("zero_shot", format!("projection to {} vs embeddings of {}", head.proj.d_out, emb.dim())));
    }
    let mut g = Bound::<f64>::inference(store);
    let x = g.input(out.stage_tokens[3].tokens.clone())?;
    let z = head.proj.forward(&mut g, x)?;
    let d = out.pooled.numel();
    let p = g.input(out.pooled.clone().reshape(vec![1, d])?)?;
    let zp = head.proj.forward(&mut g, p)?;
    let z = normalize_rows(g.value(z));
    let zp = normalize_rows(g.value(zp));
    let et = emb.vectors.transpose2();
    let token_sim = z.matmul(&et)?;
    let pooled_sim = zp.matmul(&et)?.into_data();
    let (h, w) = out.chain.stage_grid(1)?;
    zero_shot_labels(&compose_ups(&out.chain, 4, 1)?, &token_sim, &pooled_sim, emb, h, w)
}

fn normalize_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| l2_normalize(t.row(i))).collect();
    Tensor::from_rows(&rows).expect("same shape")
}
