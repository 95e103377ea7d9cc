//! JSON model files. Every float is stored as the base-16 image of its
//! big-endian bits, so a save/load round trip is bit-exact; logits are also
//! written in decimal for reading.
//!
//! ```text
//! { "version": 1, "seed": 7, "spec": { ... } | null,
//!   "alphas":  { "<edge>": { "approx": [0.1, ...], "bits": "3fb9..." } },
//!   "weights": { "c12": { "shape": [3, 4], "bits": "..." } } }
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::spec::{CellSpec, EdgeId, ParamId};
use super::state::ModelState;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlphaDoc {
    approx: Vec<f64>,
    bits: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    shape: [usize; 2],
    bits: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    version: u32,
    seed: u64,
    spec: Option<CellSpec>,
    alphas: BTreeMap<u64, AlphaDoc>,
    weights: BTreeMap<ParamId, TensorDoc>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    hex::encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = hex::decode(text).map_err(|e| Error::Format(format!("bad hex blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("hex blob length is not a multiple of 8 bytes".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_be_bytes(c.try_into().expect("chunk of 8"))))
        .collect())
}

pub fn to_json(spec: Option<&CellSpec>, state: &ModelState) -> Result<String> {
    let doc = ModelDoc {
        version: MODEL_FORMAT_VERSION,
        seed: state.seed,
        spec: spec.cloned(),
        alphas: state
            .alphas
            .iter()
            .map(|(k, v)| {
                (k.0, AlphaDoc { approx: v.clone(), bits: encode_f64s(v) })
            })
            .collect(),
        weights: state
            .weights
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    TensorDoc { shape: [t.rows(), t.cols()], bits: encode_f64s(t.data()) },
                )
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_json(text: &str) -> Result<(Option<CellSpec>, ModelState)> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if doc.version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model format version {} (expected {MODEL_FORMAT_VERSION})",
            doc.version
        )));
    }
    let mut state = ModelState::empty(doc.seed);
    for (k, a) in doc.alphas {
        state.alphas.insert(EdgeId(k), decode_f64s(&a.bits)?);
    }
    for (k, t) in doc.weights {
        let data = decode_f64s(&t.bits)?;
        state.weights.insert(k, Tensor::new(t.shape[0], t.shape[1], data)?);
    }
    if let Some(spec) = &doc.spec {
        spec.validate()?;
        state.check(spec)?;
    }
    Ok((doc.spec, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::ops::Backbone;

    #[test]
    fn round_trip_is_bit_exact() {
        for backbone in [Backbone::Darts, Backbone::TwoToOne] {
            let spec = CellSpec::new(backbone, 3, 2, 3).unwrap();
            let mut state = ModelState::for_spec(&spec, 5);
            for (i, a) in state.alphas.values_mut().enumerate() {
                a[0] = 0.1 * i as f64 + 1e-17;
                a[1] = -1000.0 / 3.0;
            }
            let text = to_json(Some(&spec), &state).unwrap();
            let (spec2, state2) = from_json(&text).unwrap();
            assert_eq!(spec2.as_ref(), Some(&spec));
            assert!(state.bit_eq(&state2));
        }
    }

    #[test]
    fn rejects_bad_blobs() {
        assert!(decode_f64s("abc").is_err());
        assert!(decode_f64s("00ff").is_err());
        assert_eq!(decode_f64s(&encode_f64s(&[-0.0])).unwrap()[0].to_bits(), (-0.0f64).to_bits());
    }
}
