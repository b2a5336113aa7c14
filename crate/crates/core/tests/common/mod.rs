#![allow(dead_code)]

use std::sync::OnceLock;

use reach_core::frame::SampleFrame;
use reach_core::pipeline::{train_bundle, TrainConfig};
use reach_core::reduce::Variant;
use reach_core::store::ModelBundle;
use reach_core::synth::{gen_session, GroundTruth, SynthConfig};

pub struct Fixture {
    pub frames: Vec<SampleFrame>,
    pub truth: GroundTruth,
    pub bundle: ModelBundle,
}

/// A 4-direction, 8-rep session at reference noise and the bundle trained on it.
pub fn small() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = SynthConfig {
            reps: 8,
            seed: 7,
            ..SynthConfig::reference(4)
        };
        let (frames, truth) = gen_session(&cfg).expect("generator");
        let bundle = train_bundle(&frames, "fixture", &TrainConfig::new(Variant::Fda, 4))
            .expect("training")
            .bundle;
        Fixture { frames, truth, bundle }
    })
}
