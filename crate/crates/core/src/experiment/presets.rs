//! Bundled experiment configs, addressable as `preset:NAME`.

const PRESETS: &[(&str, &str)] = &[
    ("blobs-rho99-fairkl", include_str!("../../presets/blobs-rho99-fairkl.toml")),
    ("blobs-rho99-meanonly", include_str!("../../presets/blobs-rho99-meanonly.toml")),
    ("blobs-rho99-baseline", include_str!("../../presets/blobs-rho99-baseline.toml")),
    ("blobs-rho99-supcon", include_str!("../../presets/blobs-rho99-supcon.toml")),
    ("biased-mnist-0.999", include_str!("../../presets/biased-mnist-0.999.toml")),
    ("biased-mnist-0.997", include_str!("../../presets/biased-mnist-0.997.toml")),
    ("biased-mnist-0.995", include_str!("../../presets/biased-mnist-0.995.toml")),
    ("biased-mnist-0.990", include_str!("../../presets/biased-mnist-0.990.toml")),
    ("biased-mnist-0.995-control", include_str!("../../presets/biased-mnist-0.995-control.toml")),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn get(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
