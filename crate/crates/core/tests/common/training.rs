//! Short-schedule training configuration for the desk-scale fixtures.

use uwsplat::train::TrainConfig;

/// The default schedule compressed to `iterations`. Warm-up is a tenth of the
/// run; densification stops at two thirds with no opacity reset, and the
/// gradient threshold is raised so the cloud stays a few thousand Gaussians.
/// Oracle scenes are Lambertian, so colour is DC-only.
pub fn scaled_config(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig { iterations, warmup_iters: iterations / 10, sh_degree: 0, ..Default::default() };
    cfg.density.tau = 3e-3;
    cfg.density.densify_end = iterations * 2 / 3;
    cfg.density.densify_start = (cfg.warmup_iters + 100).min(cfg.density.densify_end);
    cfg.density.opacity_reset_interval = 0;
    cfg
}

/// Means of consecutive `window`-iteration chunks.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values.chunks(window).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
}

/// Runs `f` on a dedicated single-thread pool.
pub fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool").install(f)
}
