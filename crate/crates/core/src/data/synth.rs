//! Procedural faces with analytic 68-point landmarks.
//!
//! A face is fully described by per-person identity factors, per-image
//! expression activations and a per-side palsy attenuation. Landmarks are
//! computed first; the renderer draws eyes, brows, nose and mouth from those
//! same points, so the landmark files are exact ground truth.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioners::LandmarkSet;

pub const KEYPOINTS: usize = 68;

/// Left/right partner of each landmark under a horizontal flip.
pub fn mirror_index(i: usize) -> usize {
    match i {
        0..=16 => 16 - i,
        17..=26 => 43 - i,
        27..=30 => i,
        31..=35 => 66 - i,
        36..=39 => 81 - i,
        40 => 47,
        41 => 46,
        42..=45 => 81 - i,
        46 => 41,
        47 => 40,
        48..=54 => 102 - i,
        55..=59 => 114 - i,
        60..=64 => 124 - i,
        65..=67 => 132 - i,
        _ => panic!("landmark index {i} out of range"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityFactors {
    pub center: [f64; 2],
    /// Half width and half height of the face ellipse.
    pub half_size: [f64; 2],
    /// Eye centers sit `eye_spacing · half_width` from the axis.
    pub eye_spacing: f64,
    pub eye_width: f64,
    pub eye_height: f64,
    pub brow_gap: f64,
    pub nose_length: f64,
    pub mouth_width: f64,
    pub hair_line: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub lips: [f64; 3],
    pub iris: [f64; 3],
    pub background: [f64; 3],
}

/// Expression activations, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpressionFactors {
    pub smile: f64,
    pub mouth_open: f64,
    pub eye_closure: f64,
    pub brow_raise: f64,
}

impl ExpressionFactors {
    fn scaled(&self, k: f64) -> Self {
        Self {
            smile: self.smile * k,
            mouth_open: self.mouth_open * k,
            eye_closure: self.eye_closure * k,
            brow_raise: self.brow_raise * k,
        }
    }
}

/// Expression prototypes, indexed by expression id modulo 8.
pub const EXPRESSIONS: [(&str, ExpressionFactors); 8] = [
    ("neutral", ExpressionFactors { smile: 0.0, mouth_open: 0.0, eye_closure: 0.0, brow_raise: 0.0 }),
    ("closed_smile", ExpressionFactors { smile: 0.9, mouth_open: 0.0, eye_closure: 0.1, brow_raise: 0.0 }),
    ("open_smile", ExpressionFactors { smile: 0.9, mouth_open: 0.7, eye_closure: 0.2, brow_raise: 0.1 }),
    ("gentle_eye_closure", ExpressionFactors { smile: 0.0, mouth_open: 0.0, eye_closure: 0.7, brow_raise: 0.0 }),
    ("tight_eye_closure", ExpressionFactors { smile: 0.3, mouth_open: 0.0, eye_closure: 1.0, brow_raise: 0.0 }),
    ("brow_raise", ExpressionFactors { smile: 0.0, mouth_open: 0.1, eye_closure: 0.0, brow_raise: 1.0 }),
    ("mouth_open", ExpressionFactors { smile: 0.0, mouth_open: 1.0, eye_closure: 0.0, brow_raise: 0.3 }),
    ("snarl", ExpressionFactors { smile: 0.6, mouth_open: 0.3, eye_closure: 0.4, brow_raise: 0.5 }),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthFaceSpec {
    pub identity: IdentityFactors,
    pub expression: ExpressionFactors,
    /// Attenuation of the expression on the image-left and image-right halves.
    pub asymmetry: [f64; 2],
}

impl SynthFaceSpec {
    pub fn severity(&self) -> f64 {
        self.asymmetry[0].max(self.asymmetry[1])
    }

    fn side(&self, side: usize) -> ExpressionFactors {
        self.expression.scaled(1.0 - self.asymmetry[side].clamp(0.0, 1.0))
    }

    pub fn landmarks(&self) -> LandmarkSet {
        let id = &self.identity;
        let [cx, cy] = id.center;
        let [w, h] = id.half_size;
        let mut p = vec![[0.0; 2]; KEYPOINTS];
        let sides = [self.side(0), self.side(1)];
        let sign = [-1.0, 1.0];

        for (i, pt) in p.iter_mut().enumerate().take(17) {
            let a = PI - i as f64 * PI / 16.0;
            *pt = [cx + w * a.cos(), cy + h * a.sin()];
        }

        let eye_y = cy - 0.15 * h;
        let ew = id.eye_width * w;
        let eye_x = |s: usize| cx + sign[s] * id.eye_spacing * w;

        // Brows: 17..=21 left outer→inner, 22..=26 right inner→outer.
        for s in 0..2 {
            let e = sides[s];
            let base = eye_y - id.brow_gap * h - 0.16 * h * e.brow_raise;
            for j in 0..5 {
                let u = -1.2 + 0.6 * j as f64;
                let arch = 0.03 * h * (1.0 - ((j as f64 - 2.0) / 2.0).powi(2));
                let idx = if s == 0 { 17 + j } else { 22 + j };
                p[idx] = [eye_x(s) + u * ew, base - arch];
            }
        }

        let nose_bottom = eye_y + id.nose_length * h;
        for j in 0..4 {
            p[27 + j] = [cx, eye_y + id.nose_length * h * j as f64 / 3.0];
        }
        for j in 0..5 {
            let k = j as f64 - 2.0;
            p[31 + j] = [cx + k * 0.06 * w, nose_bottom + 0.04 * h - 0.01 * h * k.abs()];
        }

        // Eyes: corners at ±ew, lids at ±0.35·ew.
        for s in 0..2 {
            let open = 1.0 - 0.9 * sides[s].eye_closure;
            let eh = id.eye_height * h * open;
            let ex = eye_x(s);
            let sg = sign[s];
            let outer = [ex + sg * ew, eye_y];
            let inner = [ex - sg * ew, eye_y];
            let top_out = [ex + sg * 0.35 * ew, eye_y - eh];
            let top_in = [ex - sg * 0.35 * ew, eye_y - eh];
            let bot_out = [ex + sg * 0.35 * ew, eye_y + 0.8 * eh];
            let bot_in = [ex - sg * 0.35 * ew, eye_y + 0.8 * eh];
            if s == 0 {
                p[36..42].copy_from_slice(&[outer, top_out, top_in, inner, bot_in, bot_out]);
            } else {
                p[42..48].copy_from_slice(&[inner, top_in, top_out, outer, bot_out, bot_in]);
            }
        }

        let mouth_y = cy + 0.45 * h;
        let mw = id.mouth_width * w;
        let open = 0.2 * h * 0.5 * (sides[0].mouth_open + sides[1].mouth_open);
        let lip = 0.05 * h;
        let side_of = |u: f64| usize::from(u > 0.0);
        let lift = |u: f64| 0.25 * h * sides[side_of(u)].smile * u * u;
        let xat = |u: f64| cx + u * mw * (1.0 + 0.1 * sides[side_of(u)].smile);
        let outer = |u: f64, dir: f64| [xat(u), mouth_y - lift(u) + dir * (open + lip) * (1.0 - u * u)];
        let inner = |u: f64, dir: f64| [xat(u), mouth_y - lift(u) + dir * open * (1.0 - u * u)];
        let thirds = [-1.0, -2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (j, u) in thirds.iter().enumerate() {
            p[48 + j] = outer(*u, -1.0);
        }
        for (j, u) in thirds[1..6].iter().rev().enumerate() {
            p[55 + j] = outer(*u, 1.0);
        }
        p[60] = inner(-0.85, 0.0);
        p[61] = inner(-1.0 / 3.0, -1.0);
        p[62] = inner(0.0, -1.0);
        p[63] = inner(1.0 / 3.0, -1.0);
        p[64] = inner(0.85, 0.0);
        p[65] = inner(1.0 / 3.0, 1.0);
        p[66] = inner(0.0, 1.0);
        p[67] = inner(-1.0 / 3.0, 1.0);

        LandmarkSet { points: p }
    }

    /// Renders an RGB image, channel-major `[3][res][res]`, values in [0, 1].
    pub fn render(&self, resolution: usize) -> Vec<f64> {
        let id = &self.identity;
        let lm = self.landmarks();
        let pts = &lm.points;
        let [cx, cy] = id.center;
        let [w, h] = id.half_size;
        let eyes = [&pts[36..42], &pts[42..48]];
        let iris_r = 0.6 * id.eye_height * h;
        let iris_c = [0.5 * (pts[37][0] + pts[38][0]), 0.5 * (pts[43][0] + pts[44][0])];
        let eye_y = pts[36][1];
        let brow_t = 0.025 * h;
        let nose_t = 0.012 * h;
        let outer_mouth: Vec<[f64; 2]> = pts[48..60].to_vec();
        let inner_mouth: Vec<[f64; 2]> = pts[60..68].to_vec();
        let shadow = id.skin.map(|c| c * 0.7);
        let mouth_dark = [0.15, 0.05, 0.05];
        let sclera = [0.95, 0.95, 0.95];

        let shade = |x: f64, y: f64| -> [f64; 3] {
            let ex = (x - cx) / w;
            let ey = (y - cy) / h;
            if ex * ex + ey * ey > 1.0 {
                return id.background;
            }
            if ey < -id.hair_line {
                return id.hair;
            }
            for s in 0..2 {
                if point_in_polygon([x, y], eyes[s]) {
                    let d = ((x - iris_c[s]).powi(2) + (y - eye_y).powi(2)).sqrt();
                    return if d < iris_r { id.iris } else { sclera };
                }
            }
            if polyline_distance([x, y], &pts[17..22]) < brow_t || polyline_distance([x, y], &pts[22..27]) < brow_t {
                return id.hair;
            }
            if point_in_polygon([x, y], &inner_mouth) {
                return mouth_dark;
            }
            if point_in_polygon([x, y], &outer_mouth) {
                return id.lips;
            }
            if polyline_distance([x, y], &pts[27..31]) < nose_t || polyline_distance([x, y], &pts[31..36]) < nose_t {
                return shadow;
            }
            id.skin
        };

        const SS: usize = 4;
        let n = resolution;
        let mut out = vec![0.0; 3 * n * n];
        for py in 0..n {
            for px in 0..n {
                let mut acc = [0.0; 3];
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = (px as f64 + (sx as f64 + 0.5) / SS as f64) / n as f64;
                        let y = (py as f64 + (sy as f64 + 0.5) / SS as f64) / n as f64;
                        let c = shade(x, y);
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                }
                for ch in 0..3 {
                    out[ch * n * n + py * n + px] = acc[ch] / (SS * SS) as f64;
                }
            }
        }
        out
    }
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn polyline_distance(p: [f64; 2], line: &[[f64; 2]]) -> f64 {
    line.windows(2)
        .map(|seg| {
            let (a, b) = (seg[0], seg[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            ((p[0] - a[0] - t * d[0]).powi(2) + (p[1] - a[1] - t * d[1]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn color(rng: &mut impl Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| rng.random_range(lo[i]..hi[i]))
}

/// Identity of person `person`, a pure function of `(seed, person)`.
pub fn sample_identity(seed: u64, person: usize) -> IdentityFactors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ person as u64);
    let tone = rng.random_range(0.35..0.9);
    IdentityFactors {
        center: [0.5 + rng.random_range(-0.02..0.02), 0.53 + rng.random_range(-0.02..0.02)],
        half_size: [rng.random_range(0.30..0.38), rng.random_range(0.38..0.44)],
        eye_spacing: rng.random_range(0.36..0.46),
        eye_width: rng.random_range(0.14..0.19),
        eye_height: rng.random_range(0.06..0.09),
        brow_gap: rng.random_range(0.10..0.14),
        nose_length: rng.random_range(0.30..0.38),
        mouth_width: rng.random_range(0.34..0.48),
        hair_line: rng.random_range(0.55..0.8),
        skin: [tone, tone * rng.random_range(0.7..0.85), tone * rng.random_range(0.55..0.7)],
        hair: color(&mut rng, [0.02, 0.02, 0.02], [0.5, 0.35, 0.25]),
        lips: color(&mut rng, [0.55, 0.15, 0.2], [0.85, 0.35, 0.4]),
        iris: color(&mut rng, [0.05, 0.05, 0.05], [0.35, 0.45, 0.6]),
        background: color(&mut rng, [0.1, 0.1, 0.1], [0.9, 0.9, 0.9]),
    }
}

/// Per-person palsy profile: affected side and maximum attenuation.
pub fn sample_palsy(seed: u64, person: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ person as u64);
    (rng.random_range(0..2), rng.random_range(0.0..0.9))
}

/// Expression `expression` of `person`, a pure function of `(seed, person, expression)`.
pub fn sample_face(seed: u64, person: usize, expression: usize) -> SynthFaceSpec {
    let identity = sample_identity(seed, person);
    let (side, level) = sample_palsy(seed, person);
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0xA24B_AED4_963E_E407) ^ ((person as u64) << 16) ^ expression as u64,
    );
    let proto = EXPRESSIONS[expression % EXPRESSIONS.len()].1;
    let expression = proto.scaled(rng.random_range(0.8..1.0));
    let mut asymmetry = [0.0; 2];
    asymmetry[side] = level * rng.random_range(0.8..1.0);
    SynthFaceSpec {
        identity,
        expression,
        asymmetry,
    }
}
