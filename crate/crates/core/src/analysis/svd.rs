// SPDX-License-Identifier: MIT OR Apache-2.0

//! Singular directions of a head's OV circuit read out through the
//! unembedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{matmul, thin_svd, SvdResult, Tensor};

pub const DEFAULT_TOP_K: usize = 10;

/// Number of leading singular indices reported.
pub const SINGULAR_INDICES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub id: u32,
    pub token: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularDirection {
    pub index: usize,
    pub sigma: f64,
    pub tokens: Vec<TokenScore>,
}

fn check_head(model: &Model, layer: usize, head: usize) -> Result<()> {
    let cfg = model.config();
    if layer >= cfg.n_layers {
        return Err(Error::OutOfRange(format!(
            "layer {layer} (model has {} layers)",
            cfg.n_layers
        )));
    }
    if head >= cfg.n_heads {
        return Err(Error::OutOfRange(format!(
            "head {head} (model has {} heads)",
            cfg.n_heads
        )));
    }
    Ok(())
}

/// Thin SVD of `W_OV = W_V^h W_O^h` restricted to its nonzero part.
///
/// `W_OV` has rank at most `d_head`, so it is factored as
/// `U_a (S_a V_a^T W_O^h)` and only the small right factor is decomposed.
/// The result holds the leading `min(d_model, d_head)` triplets; the
/// remaining singular values of the full `d x d` matrix are zero.
pub fn head_ov_svd(model: &Model, layer: usize, head: usize) -> Result<SvdResult> {
    check_head(model, layer, head)?;
    let dh = model.config().d_head;
    let w = model.weights();
    let wv = w.w_v_head(layer, head, dh)?;
    let wo = w.w_o_head(layer, head, dh)?;
    let a = thin_svd(&wv)?;
    let (r1, d) = (a.rank(), wo.cols());
    let mut c = vec![0.0f32; r1 * d];
    for i in 0..r1 {
        let s = f64::from(a.sigma[i]);
        let row = &mut c[i * d..(i + 1) * d];
        let mut acc = vec![0.0f64; d];
        for k in 0..dh {
            let vik = s * f64::from(a.vt.at(i, k));
            if vik == 0.0 {
                continue;
            }
            for (x, &o) in acc.iter_mut().zip(wo.row(k)) {
                *x += vik * f64::from(o);
            }
        }
        for (dst, x) in row.iter_mut().zip(acc) {
            *dst = x as f32;
        }
    }
    let b = thin_svd(&Tensor::new(vec![r1, d], c)?)?;
    Ok(SvdResult {
        u: matmul(&a.u, &b.u)?,
        sigma: b.sigma,
        vt: b.vt,
    })
}

/// Top-`k` unembedding tokens for each of the first
/// [`SINGULAR_INDICES`] right singular vectors of a head's `W_OV`.
///
/// Each direction is sign-fixed so that its largest-magnitude score is
/// positive. Ties are broken by lower token id.
pub fn svd_head_tokens(
    model: &Model,
    layer: usize,
    head: usize,
    k: usize,
) -> Result<Vec<SingularDirection>> {
    let svd = head_ov_svd(model, layer, head)?;
    let m = svd.rank().min(SINGULAR_INDICES);
    let leading = svd.vt.row_block(0, m)?;
    let scores = matmul(&leading, &model.weights().unembed)?;
    let vocab = scores.cols();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = scores.row(i);
        let peak = row.iter().copied().fold(
            0.0f32,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        let sign = if peak < 0.0 { -1.0 } else { 1.0 };
        let mut ids: Vec<u32> = (0..vocab as u32).collect();
        ids.sort_by(|&x, &y| {
            let (sx, sy) = (sign * row[x as usize], sign * row[y as usize]);
            sy.total_cmp(&sx).then(x.cmp(&y))
        });
        let tokens = ids
            .into_iter()
            .take(k)
            .map(|id| TokenScore {
                id,
                token: model.token_string(id),
                score: f64::from(sign * row[id as usize]),
            })
            .collect();
        out.push(SingularDirection {
            index: i,
            sigma: f64::from(svd.sigma[i]),
            tokens,
        });
    }
    Ok(out)
}

/// `index,sigma,rank,id,token,score` CSV, one row per reported token.
pub fn svd_report_csv(dirs: &[SingularDirection]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(format!("csv write: {e}"));
    w.write_record(["index", "sigma", "rank", "id", "token", "score"])
        .map_err(err)?;
    for d in dirs {
        for (r, t) in d.tokens.iter().enumerate() {
            w.write_record([
                d.index.to_string(),
                d.sigma.to_string(),
                r.to_string(),
                t.id.to_string(),
                t.token.clone(),
                t.score.to_string(),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(format!("csv output: {e}")))
}

/// Plain-text listing, one line per singular index.
pub fn svd_report_text(layer: usize, head: usize, dirs: &[SingularDirection]) -> String {
    let mut out = format!("layer {layer} head {head}\n");
    for d in dirs {
        let tokens: Vec<String> = d.tokens.iter().map(|t| format!("{:?}", t.token)).collect();
        out.push_str(&format!(
            "{:>2} sigma={:.6} {}\n",
            d.index,
            d.sigma,
            tokens.join(" ")
        ));
    }
    out
}
