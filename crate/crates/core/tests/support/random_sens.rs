use dmole_core::model::{ModelConfig, Module};
use dmole_core::proxy::{LayerSensitivity, Sensitivities};
use dmole_core::seed;
use rand::Rng as _;

pub fn random_sensitivities(cfg: &ModelConfig, rng: &mut seed::Rng) -> Sensitivities {
    let mut layers = Vec::new();
    for m in Module::ALL {
        // a spread of magnitudes, with an occasional exact zero
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        for layer in 0..cfg.layers(m) {
            let g = if rng.random_bool(0.05) { 0.0 } else { scale * rng.random::<f64>() };
            layers.push(LayerSensitivity { module: m, layer, grad_norm: g });
        }
    }
    Sensitivities::from_layers(layers)
}
