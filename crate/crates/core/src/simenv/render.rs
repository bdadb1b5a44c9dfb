use crate::diffcore::Tensor;
use crate::{Error, Result};

use super::{Camera, Scene, SceneObject, SimState};

/// Pinhole image of one object. Pixel `j` spans `[j, j + 1)`, so the
/// principal point sits at `(w / 2, h / 2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u_left: f64,
    pub u_right: f64,
    pub v: f64,
    pub half_size: f64,
}

impl Projection {
    pub fn disparity(&self) -> f64 {
        self.u_left - self.u_right
    }
}

/// Projects `object` when the camera has advanced `base_forward` metres.
pub fn project(camera: &Camera, object: &SceneObject, base_forward: f64) -> Result<Projection> {
    let depth = object.depth - base_forward;
    if depth <= camera.baseline {
        return Err(Error::InvalidArgument(format!(
            "object depth {depth} m is not beyond the stereo baseline {} m",
            camera.baseline
        )));
    }
    let s = camera.focal / depth;
    let cx = camera.image_w as f64 / 2.0;
    let cy = camera.image_h as f64 / 2.0;
    let half_b = camera.baseline / 2.0;
    Ok(Projection {
        // The left camera sits at -b/2, so points appear shifted right in it.
        u_left: cx + s * (object.lateral_offset + half_b),
        u_right: cx + s * (object.lateral_offset - half_b),
        v: cy + s * object.height,
        half_size: s * object.size,
    })
}

fn overlap(lo: f64, hi: f64, cell: usize) -> f64 {
    let a = cell as f64;
    (hi.min(a + 1.0) - lo.max(a)).max(0.0)
}

/// Composites anti-aliased squares, far to near, with the target on top of
/// anything at equal depth.
fn paint(image: &mut [f64], h: usize, w: usize, u: f64, p: &Projection, color: &[f64; 3]) {
    let (x0, x1) = (u - p.half_size, u + p.half_size);
    let (y0, y1) = (p.v - p.half_size, p.v + p.half_size);
    if x1 <= 0.0 || y1 <= 0.0 || x0 >= w as f64 || y0 >= h as f64 {
        return;
    }
    let cols = x0.max(0.0).floor() as usize..(x1.ceil() as usize).min(w);
    let rows = y0.max(0.0).floor() as usize..(y1.ceil() as usize).min(h);
    for i in rows {
        let cy = overlap(y0, y1, i);
        for j in cols.clone() {
            let cover = cy * overlap(x0, x1, j);
            if cover <= 0.0 {
                continue;
            }
            for (c, &col) in color.iter().enumerate() {
                let px = &mut image[(c * h + i) * w + j];
                *px = *px * (1.0 - cover) + col * cover;
            }
        }
    }
}

pub fn render_stereo(scene: &Scene, state: &SimState) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let cam = &scene.camera;
    let (h, w) = (cam.image_h, cam.image_w);
    let mut objects: Vec<(&SceneObject, Projection)> = Vec::with_capacity(1 + scene.distractors.len());
    for d in &scene.distractors {
        objects.push((d, project(cam, d, state.base_forward)?));
    }
    objects.push((&scene.target, project(cam, &scene.target, state.base_forward)?));
    // Stable sort keeps the target last among equal depths.
    objects.sort_by(|a, b| b.0.depth.total_cmp(&a.0.depth));

    let mut views = [vec![0.0f64; 3 * h * w], vec![0.0f64; 3 * h * w]];
    for (v, view) in views.iter_mut().enumerate() {
        for (c, plane) in view.chunks_exact_mut(h * w).enumerate() {
            plane.fill(scene.background[c]);
        }
        for (obj, p) in &objects {
            let u = if v == 0 { p.u_left } else { p.u_right };
            paint(view, h, w, u, p, &obj.color);
        }
    }
    let [left, right] = views.map(|view| {
        let data = view
            .into_iter()
            .map(|x| (x * scene.brightness).clamp(0.0, 1.0) as f32)
            .collect();
        Tensor::new(&[3, h, w], data).expect("shape matches data length")
    });
    Ok((left, right))
}
