//! Shared inputs for the Criterion benchmarks in `benches/`.

use mvflame_core::synthetic::{synthesize, SyntheticConfig, SyntheticScene};
use mvflame_core::{make_mini_model, FlameAssets, Image};

/// Mini model plus the default 3-view, 128 px synthetic scene every benchmark runs on.
pub struct Fixture {
    pub assets: FlameAssets,
    pub scene: SyntheticScene,
}

impl Fixture {
    pub fn new() -> Self {
        let assets = make_mini_model(0);
        let scene = synthesize(&assets, 1, &SyntheticConfig::default()).expect("default synthetic scene");
        Fixture { assets, scene }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}

/// `img` moved right by `dx` and down by `dy`, edge pixels repeated.
pub fn shifted(img: &Image, dx: usize, dy: usize) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(x, y, img.get(x.saturating_sub(dx), y.saturating_sub(dy)));
        }
    }
    out
}
