#![allow(dead_code)]

use jlssabs::abstraction::{self, AbstractionResult};
use jlssabs::case_study;
use jlssabs::composition::{self, ComposeOptions, CompositionCertificate};
use jlssabs::model::Network;
use jlssabs::simulate::InputTrajectory;

pub const COUPLING: f64 = 0.5;
pub const INPUT_SEED: u64 = 7;

pub struct CaseStudy {
    pub net: Network,
    pub abstractions: Vec<AbstractionResult>,
    pub certificate: CompositionCertificate,
    pub inputs: InputTrajectory,
}

pub fn abstractions(net: &Network) -> Vec<AbstractionResult> {
    net.subsystems
        .iter()
        .map(|s| {
            abstraction::build_abstraction(&s.sys, &case_study::p_matrix(s.id), &case_study::options(s.id))
                .unwrap_or_else(|e| panic!("subsystem {}: {e}", s.id))
        })
        .collect()
}

pub fn case_study(d: f64, horizon: f64) -> CaseStudy {
    let net = case_study::network(d);
    let abstractions = abstractions(&net);
    let gains: Vec<_> = abstractions.iter().map(|a| a.gains.clone()).collect();
    let opts = ComposeOptions {
        zero_input_ids: case_study::ZERO_INPUT_IDS.to_vec(),
        ..ComposeOptions::new()
    };
    let certificate = composition::compose(&net, &gains, &opts).expect("case study composes");
    let inputs = case_study::input_trajectory(INPUT_SEED, horizon);
    CaseStudy {
        net,
        abstractions,
        certificate,
        inputs,
    }
}
