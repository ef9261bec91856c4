//! Feature and attribute extraction from a trained SANE model.
//!
//! [`strip`] splits the model into `C` (encoder and pooling), `C_l` (up to
//! `NL_l`) and `C_λ` (through `NL_λ`). A device's attribute vector is the
//! mean of its `λ` latents; it is computed the same way for seen and unseen
//! devices since extraction needs no labels.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::ingest::DataPoint;
use crate::sane::SaneModel;

/// The classifier-free views of a trained model. All three extractors
/// share the weights held here; the classification head is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractors {
    model: SaneModel<f32>,
}

pub fn strip(model: &SaneModel<f32>) -> Extractors {
    let mut model = model.clone();
    // the head is never used again; keep a zero-width one so no logits can leak
    model.head.weight.value = crate::numerics::Tensor::zeros(&[model.config.attr_dim, 0]);
    model.head.weight.grad.clear();
    model.head.bias.value = crate::numerics::Tensor::zeros(&[0]);
    model.head.bias.grad.clear();
    Extractors { model }
}

impl Extractors {
    pub fn seq_len(&self) -> usize {
        self.model.config.seq_len
    }

    pub fn latent_dim(&self) -> usize {
        self.model.config.latent_dim
    }

    pub fn attr_dim(&self) -> usize {
        self.model.config.attr_dim
    }

    /// `C`: mean-pooled encoder output.
    pub fn c(&self, point: &DataPoint) -> Result<Vec<f32>> {
        self.model.pooled(&point.features)
    }

    /// `C_l`.
    pub fn c_l(&self, point: &DataPoint) -> Result<Vec<f32>> {
        self.model.latent_l(&point.features)
    }

    /// `C_λ`.
    pub fn c_lambda(&self, point: &DataPoint) -> Result<Vec<f32>> {
        self.model.lambda_from_l(&self.c_l(point)?)
    }

    /// `NL_λ` on its own.
    pub fn nl_lambda(&self, l: &[f32]) -> Result<Vec<f32>> {
        self.model.lambda_from_l(l)
    }

    /// Both latents from a single encoder pass.
    pub fn latents(&self, point: &DataPoint) -> Result<(Vec<f32>, Vec<f32>)> {
        let l = self.c_l(point)?;
        let lambda = self.model.lambda_from_l(&l)?;
        Ok((l, lambda))
    }
}

/// `(l, λ)` pairs of one device, in data order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub device_id: String,
    pub l: Vec<Vec<f32>>,
    pub lambda: Vec<Vec<f32>>,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }
}

pub fn extract_latents(ex: &Extractors, device_id: &str, points: &[DataPoint]) -> Result<LatentSet> {
    if points.is_empty() {
        return Err(Error::EmptyDevice(device_id.to_string()));
    }
    let mut set = LatentSet {
        device_id: device_id.to_string(),
        l: Vec::with_capacity(points.len()),
        lambda: Vec::with_capacity(points.len()),
    };
    for p in points {
        let (l, lambda) = ex.latents(p)?;
        if !l.iter().chain(&lambda).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "extract_latents" });
        }
        set.l.push(l);
        set.lambda.push(lambda);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector {
    pub device_id: String,
    pub a: Vec<f32>,
}

/// Column means of `rows`, accumulated in `f64`.
pub fn mean_rows(rows: &[Vec<f32>]) -> Vec<f32> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut acc = vec![0f64; dim];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += f64::from(v);
        }
    }
    acc.iter().map(|&s| (s / rows.len() as f64) as f32).collect()
}

/// One attribute vector per latent set, in the same order.
pub fn compute_attributes(sets: &[LatentSet]) -> Result<Vec<AttributeVector>> {
    sets.iter()
        .map(|s| {
            if s.lambda.is_empty() {
                return Err(Error::EmptyDevice(s.device_id.clone()));
            }
            Ok(AttributeVector {
                device_id: s.device_id.clone(),
                a: mean_rows(&s.lambda),
            })
        })
        .collect()
}

pub fn write_attributes_csv<W: Write>(writer: W, attrs: &[AttributeVector]) -> Result<()> {
    let dim = attrs.first().map_or(0, |a| a.a.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["device_id".to_string()];
    header.extend((0..dim).map(|j| format!("a_{j}")));
    w.write_record(&header)?;
    for a in attrs {
        let mut rec = vec![a.device_id.clone()];
        rec.extend(a.a.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("attributes.csv", e))?;
    Ok(())
}

pub fn read_attributes_csv<R: Read>(reader: R) -> Result<Vec<AttributeVector>> {
    let mut r = csv::Reader::from_reader(reader);
    let dim = r.headers()?.len().saturating_sub(1);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let a = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f32>().map_err(|e| Error::Format(format!("attribute value {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if a.len() != dim {
            return Err(Error::Format("ragged attributes row".into()));
        }
        out.push(AttributeVector {
            device_id: rec[0].to_string(),
            a,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::sane::SaneConfig;

    fn model() -> SaneModel<f32> {
        SaneModel::new(SaneConfig {
            seq_len: 4,
            d_model: 8,
            encoders: 1,
            heads: 2,
            d_mlp: 16,
            latent_dim: 5,
            attr_dim: 3,
            num_classes: 3,
            seed: 9,
            ..SaneConfig::default()
        })
        .unwrap()
    }

    fn point(seed: u32) -> DataPoint {
        let data = (0..32).map(|i| ((i as u32 * 7 + seed * 13) % 11) as f32 / 11.0).collect();
        DataPoint {
            features: Tensor::from_vec(&[4, 8], data).unwrap(),
            label: None,
            device_id: "d".into(),
        }
    }

    #[test]
    fn composition_and_reconstruction_identities() {
        let m = model();
        let ex = strip(&m);
        assert_eq!(ex, strip(&m));
        for s in 0..5 {
            let p = point(s);
            let l = ex.c_l(&p).unwrap();
            assert_eq!(ex.c_lambda(&p).unwrap(), ex.nl_lambda(&l).unwrap());
            let out = m.forward(&p.features).unwrap();
            assert_eq!(out.l, l);
            assert_eq!(m.logits_from_lambda(&ex.c_lambda(&p).unwrap()).unwrap(), out.logits);
            assert_eq!(ex.c(&p).unwrap().len(), 8);
        }
    }

    #[test]
    fn extraction_is_order_preserving_and_batch_invariant() {
        let ex = strip(&model());
        let pts: Vec<DataPoint> = (0..4).map(point).collect();
        let all = extract_latents(&ex, "d", &pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let one = extract_latents(&ex, "d", std::slice::from_ref(p)).unwrap();
            assert_eq!(one.len(), 1);
            assert_eq!(one.l[0], all.l[i]);
            assert_eq!(one.lambda[0], all.lambda[i]);
        }
        let dup = extract_latents(&ex, "d", &[pts[1].clone(), pts[1].clone()]).unwrap();
        assert_eq!(dup.l[0], dup.l[1]);
        assert!(matches!(extract_latents(&ex, "cam", &[]), Err(Error::EmptyDevice(d)) if d == "cam"));
        let mut wrong = point(0);
        wrong.features = Tensor::zeros(&[5, 8]);
        assert!(extract_latents(&ex, "d", &[wrong]).is_err());
    }

    #[test]
    fn attributes_are_means() {
        let set = LatentSet {
            device_id: "x".into(),
            l: vec![vec![0.0], vec![0.0]],
            lambda: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
        };
        let a = compute_attributes(&[set]).unwrap();
        assert_eq!(a[0].a, vec![0.5, 0.5, 0.0]);

        let ex = strip(&model());
        let p = point(3);
        let same = extract_latents(&ex, "c", &[p.clone(), p.clone(), p.clone()]).unwrap();
        let a = compute_attributes(&[same.clone()]).unwrap();
        for (x, y) in a[0].a.iter().zip(&same.lambda[0]) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn attributes_csv_round_trip() {
        let attrs = vec![
            AttributeVector { device_id: "a".into(), a: vec![0.1, -2.5, 3.0] },
            AttributeVector { device_id: "b".into(), a: vec![1e-8, 0.0, 7.25] },
        ];
        let mut buf = Vec::new();
        write_attributes_csv(&mut buf, &attrs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("device_id,a_0,a_1,a_2\n"));
        assert_eq!(read_attributes_csv(buf.as_slice()).unwrap(), attrs);
    }
}
