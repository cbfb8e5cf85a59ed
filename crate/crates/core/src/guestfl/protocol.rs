//! Guest protocol: JSON request bodies from nodes, JSON replies from the
//! link. Floats are written in shortest round-trip form and parsed exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalResult, FitResult, GuestError, ModelVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fit,
    Evaluate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeRequest {
    Register { node: String },
    Pull { node: String },
    Push { node: String, round: u32, phase: Phase, result: PushResult },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PushResult {
    Fit(FitResult),
    Evaluate(EvalResult),
    Fault { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinkReply {
    Registered,
    Task { round: u32, phase: Phase, model: ModelVector, config: BTreeMap<String, f64> },
    Wait,
    Accepted,
    Done,
    Failed { reason: String },
    Rejected { reason: String },
}

pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("guest messages serialize")
}

pub fn decode<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, GuestError> {
    serde_json::from_slice(body).map_err(|e| GuestError::Protocol(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bitwise() {
        let model = ModelVector { weights: vec![0.1, 1.0 / 3.0, -2.2250738585072014e-308, 5e-324, 1e300], version: 2 };
        let msg = LinkReply::Task { round: 1, phase: Phase::Fit, model: model.clone(), config: BTreeMap::new() };
        let back: LinkReply = decode(&encode(&msg)).unwrap();
        let LinkReply::Task { model: m, .. } = back else { panic!() };
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m.weights), bits(&model.weights));
    }

    #[test]
    fn tagged_shape() {
        let body = encode(&NodeRequest::Pull { node: "site-1".into() });
        assert_eq!(body, br#"{"type":"pull","node":"site-1"}"#);
    }
}
