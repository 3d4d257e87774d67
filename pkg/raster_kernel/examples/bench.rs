//! Throughput check: one million random points into a full-HD frame.
//!
//! Run with `cargo run --release --example bench`.

use raster_kernel::{rasterize_scale_fast, Camera, KernelScene, PoseRT, Z_NEAR};
use std::time::Instant;

/// SplitMix64, enough randomness for benchmark data.
struct Rng(u64);

impl Rng {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn range(&mut self, lo: f32, hi: f32) -> f32 {
        let unit = (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32;
        lo + (hi - lo) * unit
    }
}

fn main() {
    let n = 1_000_000usize;
    let (width, height) = (1920u32, 1080u32);
    let mut rng = Rng(7);
    let mut positions = Vec::with_capacity(n * 3);
    for _ in 0..n {
        positions.push(rng.range(-3.0, 3.0));
        positions.push(rng.range(-3.0, 3.0));
        positions.push(rng.range(0.5, 9.0));
    }
    let scene = KernelScene {
        positions: &positions,
        camera: Camera {
            fx: 0.9 * width as f32,
            fy: 0.9 * width as f32,
            cx: width as f32 / 2.0,
            cy: height as f32 / 2.0,
            width,
            height,
        },
        pose: PoseRT {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0, 0.0, 0.0],
        },
    };

    // warm-up pass primes the thread pool and the page cache
    rasterize_scale_fast(&scene, 0, Z_NEAR).unwrap();

    let rounds = 20;
    let start = Instant::now();
    let mut covered = 0usize;
    for _ in 0..rounds {
        let frag = rasterize_scale_fast(&scene, 0, Z_NEAR).unwrap();
        covered = frag.index_map.iter().filter(|&&i| i >= 0).count();
    }
    let elapsed = start.elapsed().as_secs_f64();
    let per_frame = elapsed / rounds as f64;
    println!(
        "{n} points -> {width}x{height}: {:.2} ms/frame, {:.1} Mpts/s, {covered} pixels covered",
        per_frame * 1e3,
        n as f64 / per_frame / 1e6,
    );
}
