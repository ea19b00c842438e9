// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV exports of attention maps and importance vectors.

use super::importance::importance_vectors;
use super::PromptContributions;
use crate::error::{Error, Result};
use crate::model::ActivationCache;
use crate::tensor::Tensor;

/// Lower-triangular attention matrix of one head; `layer` is a 0-based
/// block index.
pub fn export_attention_map(cache: &ActivationCache, layer: usize, head: usize) -> Result<Tensor> {
    if layer >= cache.n_layers() {
        return Err(Error::OutOfRange(format!(
            "layer {layer} (model has {} layers)",
            cache.n_layers()
        )));
    }
    let n_heads = cache.layer(layer).attn_weights.shape()[0];
    if head >= n_heads {
        return Err(Error::OutOfRange(format!(
            "head {head} (model has {n_heads} heads)"
        )));
    }
    Ok(cache.attn_matrix(layer, head))
}

fn write_record<I, S>(w: &mut csv::Writer<Vec<u8>>, fields: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields)
        .map_err(|e| Error::Parse(format!("csv write: {e}")))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(format!("csv output: {e}")))
}

/// Dense CSV, one row per query position, no header.
pub fn attention_csv(map: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..map.rows() {
        let row: Vec<String> = map.row(i).iter().map(f32::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `pos,token,pos_tag,is_first_subword,v_1..v_{LH+L}`, one row per
/// position. Missing tags and subword flags are left empty.
pub fn importance_vectors_csv(
    c: &PromptContributions,
    pos_tags: Option<&[Option<String>]>,
) -> Result<String> {
    if let Some(tags) = pos_tags {
        if tags.len() != c.seq_len() {
            return Err(Error::Dimension(format!(
                "{} annotations for {} positions",
                tags.len(),
                c.seq_len()
            )));
        }
    }
    let vectors = importance_vectors(c);
    let width = c.n_layers() * c.n_heads() + c.n_layers();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["pos", "token", "pos_tag", "is_first_subword"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=width).map(|i| format!("v_{i}")));
    write_record(&mut w, &header)?;
    for v in vectors {
        let pos = v.position;
        let mut row = vec![
            pos.to_string(),
            c.tokens[pos].clone(),
            pos_tags.and_then(|t| t[pos].clone()).unwrap_or_default(),
            c.is_first_subword
                .as_ref()
                .map(|f| f[pos].to_string())
                .unwrap_or_default(),
        ];
        row.extend(v.values.iter().map(f64::to_string));
        write_record(&mut w, &row)?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy::random_weights;
    use crate::model::{Model, ModelConfig};

    fn cache(ids: &[u32]) -> ActivationCache {
        let cfg = ModelConfig::gpt2_style(2, 2, 4, 20);
        let model = Model::new("t", cfg.clone(), random_weights(&cfg, 3).unwrap(), None).unwrap();
        model
            .forward(&model.tokens_from_ids(ids, None).unwrap())
            .unwrap()
    }

    #[test]
    fn single_token_map_is_one() {
        let m = export_attention_map(&cache(&[5]), 1, 1).unwrap();
        assert_eq!(m.shape(), &[1, 1]);
        assert_eq!(m.at(0, 0), 1.0);
        assert_eq!(attention_csv(&m), "1\n");
    }

    #[test]
    fn maps_are_lower_triangular_and_stochastic() {
        let c = cache(&[1, 2, 3, 4, 5, 6]);
        for l in 0..2 {
            for h in 0..2 {
                let m = export_attention_map(&c, l, h).unwrap();
                for i in 0..6 {
                    let s: f64 = m.row(i).iter().map(|&x| f64::from(x)).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(m.row(i)[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
        assert!(matches!(
            export_attention_map(&c, 2, 0),
            Err(Error::OutOfRange(_))
        ));
        assert!(matches!(
            export_attention_map(&c, 0, 2),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn csv_rows_match_the_matrix() {
        let c = cache(&[7, 8, 9]);
        let m = export_attention_map(&c, 0, 0).unwrap();
        let text = attention_csv(&m);
        let parsed: Vec<Vec<f32>> = text
            .lines()
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(parsed.len(), 3);
        for (i, row) in parsed.iter().enumerate() {
            assert_eq!(row.as_slice(), m.row(i));
        }
    }

    #[test]
    fn importance_csv_layout() {
        let mut c = PromptContributions::zeros(1, 2, 2)
            .with_words(vec![0, 0])
            .unwrap();
        c.tokens = vec!["a,b".into(), "c".into()];
        c.set_sub(0, 1, 1, 0, 0.25);
        c.set_ffn(0, 1, 0.5);
        let tags = vec![Some("NOUN".to_string()), None];
        let text = importance_vectors_csv(&c, Some(&tags)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "pos,token,pos_tag,is_first_subword,v_1,v_2,v_3");
        assert_eq!(lines[1], "0,\"a,b\",NOUN,true,0,0,0");
        assert_eq!(lines[2], "1,c,,false,0,0.25,0.5");
        assert!(importance_vectors_csv(&c, Some(&tags[..1])).is_err());
    }
}
