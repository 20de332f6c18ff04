//! Oracle scene specifications used by the end-to-end tests.

use uwsplat::synth::{BackdropSpec, DistractorSpec, SynthSceneSpec};

/// 500 Gaussians, 12 views at 64×64 in a medium with β_d = (0.4, 0.2, 0.1),
/// β_b = 0.3 and b = (0.1, 0.3, 0.5). Half of the Gaussians form an
/// enclosing backdrop so every frame is fully covered and its clean colour
/// averages to mid-gray.
pub fn oracle_spec(seed: u64) -> SynthSceneSpec {
    SynthSceneSpec {
        seed,
        backdrop: Some(BackdropSpec { radius: 7.0, count: 250, scale: 0.8 }),
        ..Default::default()
    }
}

/// The oracle scene with a 14×14 red square (≈5% of the frame) sweeping
/// diagonally across half of the training views.
pub fn distractor_spec(seed: u64) -> SynthSceneSpec {
    SynthSceneSpec {
        distractor: Some(DistractorSpec {
            size: 14,
            start: [4.0, 6.0],
            end: [46.0, 44.0],
            color: DISTRACTOR_COLOR,
            fraction: 0.5,
        }),
        ..oracle_spec(seed)
    }
}

pub const DISTRACTOR_COLOR: [f64; 3] = [0.95, 0.1, 0.1];
