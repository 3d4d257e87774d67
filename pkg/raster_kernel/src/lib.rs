//! Accelerated hard z-buffer point rasterizer.
//!
//! Bit-identical to the Python reference implementation: all projection
//! arithmetic is float32 in a pinned, left-associative operation order,
//!
//! ```text
//! x  = r00*x0 + r01*x1 + r02*x2 + t0
//! xz = x / z
//! u  = fx_s * xz + cx_s          (fx_s = fx / 2^s, computed in f32)
//! ui = floor(u + 0.5) if u >= 0 else ceil(u - 0.5)
//! ```
//!
//! and pixel ownership is a minimum over packed 64-bit keys
//! `(depth_bits << 32) | point_index`, which encodes both the nearer-depth
//! rule and the smaller-index tie-break in one total order. The reduction
//! runs in parallel with per-pixel atomic minima; because `min` over a total
//! order is commutative and associative, the result is independent of thread
//! scheduling. No FMA contraction occurs: rustc does not fuse float
//! multiply-adds by default, matching the reference's separate mul/add ops.

use rayon::prelude::*;
use std::sync::atomic::{AtomicU64, Ordering};

pub const ENV_INDEX: i32 = -1;
pub const Z_NEAR: f32 = 1e-4;
pub const ABI_VERSION: u32 = 1;

const EMPTY_KEY: u64 = u64::MAX;
const POINTS_PER_TASK: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRT {
    /// Row-major world-to-camera rotation.
    pub rotation: [f32; 9],
    pub translation: [f32; 3],
}

/// Borrowed flat buffers describing one posed cloud.
pub struct KernelScene<'a> {
    /// N*3 row-major point positions.
    pub positions: &'a [f32],
    pub camera: Camera,
    pub pose: PoseRT,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub scale: u32,
    pub width: usize,
    pub height: usize,
    /// Winning point index per pixel, ENV_INDEX where empty.
    pub index_map: Vec<i32>,
    /// Winner's camera-space depth per pixel, 0 where empty.
    pub depth_map: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelError {
    /// positions length is not a multiple of 3, or the count overflows i32.
    BufferMismatch,
    /// Zero-sized frame or a scale too large to shift into.
    InvalidDims,
}

impl std::fmt::Display for KernelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelError::BufferMismatch => write!(f, "position buffer length mismatch"),
            KernelError::InvalidDims => write!(f, "invalid frame dimensions"),
        }
    }
}

impl std::error::Error for KernelError {}

#[inline]
fn round_half_away(x: f32) -> f32 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

fn scaled_dims(width: u32, height: u32, scale: u32) -> (usize, usize) {
    let s = 1u64 << scale;
    let w = (width as u64 + s - 1) / s;
    let h = (height as u64 + s - 1) / s;
    (w as usize, h as usize)
}

/// Project one point; `Some((px, py, depth))` iff it lands inside the frame
/// in front of the near plane. Comparisons are written so NaN fails them.
#[inline]
#[allow(clippy::too_many_arguments)]
fn project_one(
    x0: f32,
    x1: f32,
    x2: f32,
    r: &[f32; 9],
    t: &[f32; 3],
    fx: f32,
    fy: f32,
    cx: f32,
    cy: f32,
    wf: f32,
    hf: f32,
    z_near: f32,
) -> Option<(u64, u64, f32)> {
    let x = r[0] * x0 + r[1] * x1 + r[2] * x2 + t[0];
    let y = r[3] * x0 + r[4] * x1 + r[5] * x2 + t[1];
    let z = r[6] * x0 + r[7] * x1 + r[8] * x2 + t[2];
    let xz = x / z;
    let yz = y / z;
    let u = fx * xz + cx;
    let v = fy * yz + cy;
    let ui = round_half_away(u);
    let vi = round_half_away(v);
    if z > z_near && ui >= 0.0 && ui < wf && vi >= 0.0 && vi < hf {
        Some((ui as u64, vi as u64, z))
    } else {
        None
    }
}

/// Z-buffer the scene at resolution ceil(H/2^s) x ceil(W/2^s).
pub fn rasterize_scale_fast(
    scene: &KernelScene,
    scale: u32,
    z_near: f32,
) -> Result<Fragment, KernelError> {
    if scene.positions.len() % 3 != 0 {
        return Err(KernelError::BufferMismatch);
    }
    let n = scene.positions.len() / 3;
    if n > i32::MAX as usize {
        return Err(KernelError::BufferMismatch);
    }
    if scene.camera.width == 0 || scene.camera.height == 0 || scale >= 32 {
        return Err(KernelError::InvalidDims);
    }

    let div = (1u64 << scale) as f32;
    let fx = scene.camera.fx / div;
    let fy = scene.camera.fy / div;
    let cx = scene.camera.cx / div;
    let cy = scene.camera.cy / div;
    let (ws, hs) = scaled_dims(scene.camera.width, scene.camera.height, scale);
    let (wf, hf) = (ws as f32, hs as f32);

    let keys: Vec<AtomicU64> = (0..ws * hs).map(|_| AtomicU64::new(EMPTY_KEY)).collect();
    let r = &scene.pose.rotation;
    let t = &scene.pose.translation;
    scene
        .positions
        .par_chunks(3 * POINTS_PER_TASK)
        .enumerate()
        .for_each(|(task, chunk)| {
            let base = task * POINTS_PER_TASK;
            for (j, p) in chunk.chunks_exact(3).enumerate() {
                if let Some((px, py, z)) =
                    project_one(p[0], p[1], p[2], r, t, fx, fy, cx, cy, wf, hf, z_near)
                {
                    let flat = (py * ws as u64 + px) as usize;
                    let packed = ((z.to_bits() as u64) << 32) | (base + j) as u64;
                    keys[flat].fetch_min(packed, Ordering::Relaxed);
                }
            }
        });

    let mut index_map = vec![ENV_INDEX; ws * hs];
    let mut depth_map = vec![0.0f32; ws * hs];
    index_map
        .par_iter_mut()
        .zip(depth_map.par_iter_mut())
        .zip(keys.par_iter())
        .for_each(|((idx, depth), key)| {
            let key = key.load(Ordering::Relaxed);
            if key != EMPTY_KEY {
                *idx = (key & 0xFFFF_FFFF) as i32;
                *depth = f32::from_bits((key >> 32) as u32);
            }
        });
    Ok(Fragment {
        scale,
        width: ws,
        height: hs,
        index_map,
        depth_map,
    })
}

/// Fragments at scales 0..num_scales-1, full resolution first.
pub fn rasterize_pyramid_fast(
    scene: &KernelScene,
    num_scales: u32,
    z_near: f32,
) -> Result<Vec<Fragment>, KernelError> {
    (0..num_scales)
        .map(|s| rasterize_scale_fast(scene, s, z_near))
        .collect()
}

// ---------------------------------------------------------------------------
// C ABI

/// ABI tag checked by loaders before any other call.
#[no_mangle]
pub extern "C" fn rk_abi_version() -> u32 {
    ABI_VERSION
}

/// Rasterize into caller-allocated grids of ceil(h/2^s)*ceil(w/2^s) entries.
///
/// Intrinsics and frame dimensions are full-resolution; the kernel derives
/// the scaled values itself, exactly as the reference does. Returns 0 on
/// success, 1 for a null pointer, 2 for invalid dimensions.
///
/// # Safety
/// `positions` must hold n*3 f32, `rotation` 9, `translation` 3, and the two
/// output pointers ceil(height/2^scale)*ceil(width/2^scale) entries each.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rk_rasterize_scale(
    positions: *const f32,
    n: u64,
    rotation: *const f32,
    translation: *const f32,
    fx: f32,
    fy: f32,
    cx: f32,
    cy: f32,
    width: u32,
    height: u32,
    scale: u32,
    z_near: f32,
    index_out: *mut i32,
    depth_out: *mut f32,
) -> i32 {
    if (positions.is_null() && n > 0)
        || rotation.is_null()
        || translation.is_null()
        || index_out.is_null()
        || depth_out.is_null()
    {
        return 1;
    }
    if width == 0 || height == 0 || scale >= 32 || n > i32::MAX as u64 {
        return 2;
    }
    let positions = if n == 0 {
        &[][..]
    } else {
        std::slice::from_raw_parts(positions, n as usize * 3)
    };
    let rotation_slice = std::slice::from_raw_parts(rotation, 9);
    let translation_slice = std::slice::from_raw_parts(translation, 3);
    let scene = KernelScene {
        positions,
        camera: Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        },
        pose: PoseRT {
            rotation: rotation_slice.try_into().unwrap(),
            translation: translation_slice.try_into().unwrap(),
        },
    };
    let fragment = match rasterize_scale_fast(&scene, scale, z_near) {
        Ok(f) => f,
        Err(KernelError::BufferMismatch) | Err(KernelError::InvalidDims) => return 2,
    };
    let pixels = fragment.width * fragment.height;
    std::slice::from_raw_parts_mut(index_out, pixels).copy_from_slice(&fragment.index_map);
    std::slice::from_raw_parts_mut(depth_out, pixels).copy_from_slice(&fragment.depth_map);
    0
}

// ---------------------------------------------------------------------------
