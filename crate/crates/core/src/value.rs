//! Language-neutral argument values.
//!
//! `ValueRepr` is what traces store, what the fuzzer mutates and what travels
//! to the executor. Floats are written as JSON numbers when finite and as the
//! strings `"nan"`, `"inf"`, `"-inf"` otherwise, so every value survives a
//! serialize/parse cycle bit for bit.

use serde::{Deserialize, Serialize};

/// Abstract argument value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ValueRepr {
    Tensor(TensorSpec),
    Int {
        value: i64,
    },
    Float {
        #[serde(with = "float_serde")]
        value: f64,
    },
    Bool {
        value: bool,
    },
    Str {
        value: String,
    },
    None,
    List {
        items: Vec<ValueRepr>,
    },
    Tuple {
        items: Vec<ValueRepr>,
    },
    /// Expression text that the executor evaluates as-is.
    Raw {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    /// Dimensions. Negative entries are legal and deliberately reachable.
    pub shape: Vec<i64>,
    pub dtype: String,
    pub content: TensorContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorContent {
    Inline(#[serde(with = "float_vec_serde")] Vec<f64>),
    /// Elements are drawn by the executor from a generator seeded with this value.
    Seed(u64),
}

impl ValueRepr {
    pub fn int(value: i64) -> Self {
        ValueRepr::Int { value }
    }

    pub fn float(value: f64) -> Self {
        ValueRepr::Float { value }
    }

    pub fn bool(value: bool) -> Self {
        ValueRepr::Bool { value }
    }

    pub fn str(value: impl Into<String>) -> Self {
        ValueRepr::Str { value: value.into() }
    }

    pub fn raw(text: impl Into<String>) -> Self {
        ValueRepr::Raw { text: text.into() }
    }

    pub fn tensor_seeded(shape: Vec<i64>, dtype: impl Into<String>, seed: u64) -> Self {
        ValueRepr::Tensor(TensorSpec {
            shape,
            dtype: dtype.into(),
            content: TensorContent::Seed(seed),
        })
    }

    /// Type tag used for argument type sets.
    pub fn type_tag(&self) -> &'static str {
        match self {
            ValueRepr::Tensor(_) => "tensor",
            ValueRepr::Int { .. } => "int",
            ValueRepr::Float { .. } => "float",
            ValueRepr::Bool { .. } => "bool",
            ValueRepr::Str { .. } => "str",
            ValueRepr::None => "none",
            ValueRepr::List { .. } => "list",
            ValueRepr::Tuple { .. } => "tuple",
            ValueRepr::Raw { .. } => "raw",
        }
    }

    /// Checks the structural invariants (inline content length).
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ValueRepr::Tensor(t) => t.validate(),
            ValueRepr::List { items } | ValueRepr::Tuple { items } => items.iter().try_for_each(ValueRepr::validate),
            _ => Ok(()),
        }
    }

    /// Python-flavoured literal rendering, used in plan printouts.
    pub fn render(&self) -> String {
        match self {
            ValueRepr::Tensor(t) => {
                let shape: Vec<String> = t.shape.iter().map(i64::to_string).collect();
                format!("Tensor<[{}], {}>", shape.join(", "), t.dtype)
            }
            ValueRepr::Int { value } => value.to_string(),
            ValueRepr::Float { value } => render_float(*value),
            ValueRepr::Bool { value } => if *value { "True" } else { "False" }.to_string(),
            ValueRepr::Str { value } => format!("{value:?}"),
            ValueRepr::None => "None".to_string(),
            ValueRepr::List { items } => {
                let parts: Vec<String> = items.iter().map(ValueRepr::render).collect();
                format!("[{}]", parts.join(", "))
            }
            ValueRepr::Tuple { items } => {
                let parts: Vec<String> = items.iter().map(ValueRepr::render).collect();
                if parts.len() == 1 {
                    format!("({},)", parts[0])
                } else {
                    format!("({})", parts.join(", "))
                }
            }
            ValueRepr::Raw { text } => text.clone(),
        }
    }
}

fn render_float(v: f64) -> String {
    if v.is_nan() {
        "float('nan')".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "float('inf')" } else { "float('-inf')" }.to_string()
    } else if v.fract() == 0.0 && v.abs() < 1e16 {
        format!("{v:.1}")
    } else {
        format!("{v:?}")
    }
}

impl TensorSpec {
    /// Number of elements implied by the shape, counting only non-negative dims.
    pub fn element_count(&self) -> u64 {
        self.shape
            .iter()
            .filter(|d| **d >= 0)
            .fold(1u64, |acc, d| acc.saturating_mul(*d as u64))
    }

    pub fn validate(&self) -> Result<(), String> {
        if let TensorContent::Inline(values) = &self.content {
            let expected = self.element_count();
            if values.len() as u64 != expected {
                return Err(format!(
                    "inline tensor content has {} values, shape {:?} implies {}",
                    values.len(),
                    self.shape,
                    expected
                ));
            }
        }
        Ok(())
    }
}

pub fn is_float_dtype(dtype: &str) -> bool {
    matches!(
        dtype,
        "float16" | "bfloat16" | "float32" | "float64" | "half" | "float" | "double"
    ) || dtype.starts_with("complex")
}

fn float_to_json(v: f64) -> serde_json::Value {
    if v.is_nan() {
        serde_json::Value::String("nan".into())
    } else if v.is_infinite() {
        serde_json::Value::String(if v > 0.0 { "inf" } else { "-inf" }.into())
    } else {
        serde_json::Value::from(v)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FloatWire {
    Num(f64),
    Text(String),
}

impl FloatWire {
    fn into_f64<E: serde::de::Error>(self) -> Result<f64, E> {
        match self {
            FloatWire::Num(v) => Ok(v),
            FloatWire::Text(s) => match s.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("invalid float literal {other:?}"))),
            },
        }
    }
}

pub(crate) mod float_serde {
    use super::{float_to_json, FloatWire};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        float_to_json(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        FloatWire::deserialize(d)?.into_f64()
    }
}

pub(crate) mod float_vec_serde {
    use super::{float_to_json, FloatWire};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let items: Vec<serde_json::Value> = v.iter().map(|x| float_to_json(*x)).collect();
        items.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<FloatWire>::deserialize(d)?
            .into_iter()
            .map(FloatWire::into_f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::arb_value;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_with_kind_tags() {
        let v = ValueRepr::List {
            items: vec![ValueRepr::int(1), ValueRepr::None, ValueRepr::str("a")],
        };
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(
            text,
            r#"{"kind":"list","items":[{"kind":"int","value":1},{"kind":"none"},{"kind":"str","value":"a"}]}"#
        );
        let t = ValueRepr::tensor_seeded(vec![2, -1], "float32", 7);
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"kind":"tensor","shape":[2,-1],"dtype":"float32","content":{"seed":7}}"#
        );
    }

    #[test]
    fn non_finite_floats_survive() {
        for x in [f64::INFINITY, f64::NEG_INFINITY] {
            let v = ValueRepr::float(x);
            let back: ValueRepr = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
            assert_eq!(back, v);
        }
        let nan: ValueRepr = serde_json::from_str(r#"{"kind":"float","value":"nan"}"#).unwrap();
        match nan {
            ValueRepr::Float { value } => assert!(value.is_nan()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inline_content_length_checked() {
        let ok = ValueRepr::Tensor(TensorSpec {
            shape: vec![2, 2],
            dtype: "float32".into(),
            content: TensorContent::Inline(vec![1.0, 2.0, 3.0, 4.0]),
        });
        assert!(ok.validate().is_ok());
        let bad = ValueRepr::Tensor(TensorSpec {
            shape: vec![3],
            dtype: "float32".into(),
            content: TensorContent::Inline(vec![1.0]),
        });
        assert!(bad.validate().is_err());
        // negative dims do not contribute to the element count
        let neg = TensorSpec {
            shape: vec![-1, 4],
            dtype: "int64".into(),
            content: TensorContent::Seed(0),
        };
        assert_eq!(neg.element_count(), 4);
    }

    #[test]
    fn render_is_python_like() {
        assert_eq!(ValueRepr::float(0.0).render(), "0.0");
        assert_eq!(ValueRepr::bool(true).render(), "True");
        assert_eq!(
            ValueRepr::Tuple {
                items: vec![ValueRepr::int(3)]
            }
            .render(),
            "(3,)"
        );
    }

    proptest! {
        #[test]
        fn serialization_round_trips_bit_exactly(v in arb_value()) {
            let first = serde_json::to_string(&v).unwrap();
            let back: ValueRepr = serde_json::from_str(&first).unwrap();
            let second = serde_json::to_string(&back).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
