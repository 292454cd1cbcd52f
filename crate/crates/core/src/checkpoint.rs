//! JSON parameter checkpoints: a map from parameter name to shape and
//! row-major values, plus free-form metadata. Floats are written with the
//! shortest round-tripping representation, so save and load are bit-stable.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tensor2};

pub const FORMAT: &str = "umre-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub meta: serde_json::Value,
    pub params: IndexMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            format: FORMAT.into(),
            meta,
            params: IndexMap::new(),
        }
    }

    /// Store every parameter of `set` under `prefix` + its own name.
    pub fn insert(&mut self, prefix: &str, set: &dyn ParamSet) -> Result<()> {
        for (name, p) in set.named_params() {
            let key = format!("{prefix}{name}");
            if !p.value.all_finite() {
                return Err(Error::Numeric(format!("parameter {key} is not finite")));
            }
            let (r, c) = p.shape();
            let prev = self.params.insert(
                key.clone(),
                StoredTensor {
                    shape: [r, c],
                    data: p.value.data().to_vec(),
                },
            );
            if prev.is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {key}")));
            }
        }
        Ok(())
    }

    /// Overwrite the values of `set` from entries under `prefix`. Every
    /// parameter must be present with a matching shape.
    pub fn restore(&self, prefix: &str, set: &mut dyn ParamSet) -> Result<()> {
        let names: Vec<String> = set.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(set.params_mut()) {
            let key = format!("{prefix}{name}");
            let stored = self
                .params
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {key}")))?;
            let (r, c) = p.shape();
            if stored.shape != [r, c] {
                return Err(Error::Checkpoint(format!(
                    "parameter {key}: stored shape {:?}, expected [{r}, {c}]",
                    stored.shape
                )));
            }
            p.value = Tensor2::new(r, c, stored.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {key}: {e}")))?;
            p.zero_grad();
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints always serialise")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", ck.format)));
        }
        for (k, t) in &ck.params {
            if t.shape[0] * t.shape[1] != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {k}: shape {:?} does not match {} values",
                    t.shape,
                    t.data.len()
                )));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Activation, Mlp};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[3, 5, 1], Activation::Relu, Activation::Identity, &mut rng);
        let mut ck = Checkpoint::new(serde_json::json!({"k": 1}));
        ck.insert("a.", &mlp).unwrap();
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let mut other = Mlp::zeroed(&[3, 5, 1], Activation::Relu, Activation::Identity);
        back.restore("a.", &mut other).unwrap();
        let bits = |m: &Mlp| m.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&other), bits(&mlp));
    }

    #[test]
    fn shape_and_name_mismatches_are_errors() {
        let mlp = Mlp::zeroed(&[3, 5, 1], Activation::Relu, Activation::Identity);
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.insert("", &mlp).unwrap();
        let mut wrong = Mlp::zeroed(&[3, 4, 1], Activation::Relu, Activation::Identity);
        assert!(matches!(ck.restore("", &mut wrong), Err(Error::Checkpoint(_))));
        let mut same = mlp.clone();
        assert!(matches!(ck.restore("x.", &mut same), Err(Error::Checkpoint(_))));
        assert!(matches!(ck.insert("", &mlp), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(Checkpoint::from_json("{").is_err());
        let bad = r#"{"format":"other","meta":null,"params":{}}"#;
        assert!(Checkpoint::from_json(bad).is_err());
        let bad = r#"{"format":"umre-checkpoint/1","meta":null,"params":{"a":{"shape":[2,2],"data":[1.0]}}}"#;
        assert!(Checkpoint::from_json(bad).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_floats_survive(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut ck = Checkpoint::new(serde_json::Value::Null);
            ck.params.insert("p".into(), StoredTensor { shape: [1, values.len()], data: values.clone() });
            let back = Checkpoint::from_json(&ck.to_json()).unwrap();
            let got: Vec<u64> = back.params["p"].data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
