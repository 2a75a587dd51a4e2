//! Procedural "humanoid" scenes with part labels at three granularities.
//!
//! Each figure is a head disc, a torso rectangle, two two-segment arms and
//! two two-segment legs with random pose, proportions and colours. Pixels are
//! first assigned a geometric *atom* (hat, face, upper arm, shoe, ...); the
//! atom is then mapped onto the target taxonomy's fine labels by name, falling
//! back to a sibling under the same Level-2 part when the taxonomy does not
//! split that finely. Later figures overwrite earlier ones.
//!
//! Colour only identifies the Level-2 part: all pixels of one part of one
//! figure share a colour, so finer labels must be told apart by geometry.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::taxonomy::{Level, Taxonomy, ARM, HEAD, LEG, TORSO};
use crate::tensor::Tensor;

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub min_figures: usize,
    pub max_figures: usize,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Standard deviation of per-figure colour perturbations.
    pub palette_jitter: f64,
    /// Nominal figure height as a fraction of the image height.
    pub figure_scale: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            min_figures: 1,
            max_figures: 2,
            noise_sigma: 0.05,
            palette_jitter: 0.05,
            figure_scale: 0.9,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Invalid(format!(
                "scenes must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.min_figures == 0 || self.min_figures > self.max_figures {
            return Err(Error::Invalid("figure count range is empty".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.palette_jitter >= 0.0 && self.figure_scale > 0.0) {
            return Err(Error::Invalid("noise, jitter and scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Geometric sub-regions of a figure, finer than any taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Atom {
    Hat,
    Hair,
    Face,
    Neck,
    Shirt,
    Belt,
    UpperArm,
    LowerArm,
    Hand,
    Hip,
    Thigh,
    Shin,
    Shoe,
}

impl Atom {
    const ALL: [Atom; 13] = [
        Atom::Hat,
        Atom::Hair,
        Atom::Face,
        Atom::Neck,
        Atom::Shirt,
        Atom::Belt,
        Atom::UpperArm,
        Atom::LowerArm,
        Atom::Hand,
        Atom::Hip,
        Atom::Thigh,
        Atom::Shin,
        Atom::Shoe,
    ];

    fn part(self) -> usize {
        match self {
            Atom::Hat | Atom::Hair | Atom::Face => HEAD,
            Atom::Neck | Atom::Shirt | Atom::Belt => TORSO,
            Atom::UpperArm | Atom::LowerArm | Atom::Hand => ARM,
            Atom::Hip | Atom::Thigh | Atom::Shin | Atom::Shoe => LEG,
        }
    }

    /// Preferred fine label names, most specific first.
    fn candidates(self) -> &'static [&'static str] {
        match self {
            Atom::Hat => &["Hat", "Hair", "Head"],
            Atom::Hair => &["Hair", "Head"],
            Atom::Face => &["Face", "Head"],
            Atom::Neck => &["TorsoSkin", "Torso"],
            Atom::Shirt => &["UpperClothes", "Torso"],
            Atom::Belt => &["Belt", "UpperClothes", "Torso"],
            Atom::UpperArm => &["UpperArm", "Arm"],
            Atom::LowerArm => &["LowerArm", "Arm"],
            Atom::Hand => &["Hand", "LowerArm", "Arm"],
            Atom::Hip => &["Pants", "UpperLeg", "Leg"],
            Atom::Thigh => &["UpperLeg", "Leg"],
            Atom::Shin => &["LowerLeg", "Leg"],
            Atom::Shoe => &["Shoe", "LowerLeg", "Leg"],
        }
    }
}

/// How a taxonomy's fine labels are rendered and assigned.
struct Palette {
    /// Fine label for each atom, indexed like `Atom::ALL`.
    atom_label: [usize; 13],
}

const PART_COLORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [0.95, 0.75, 0.60],
    [0.25, 0.45, 0.85],
    [0.85, 0.35, 0.30],
    [0.35, 0.72, 0.35],
];

impl Palette {
    fn new(taxonomy: &Taxonomy) -> Result<Self> {
        let fine = taxonomy.fine_labels();
        let mut atom_label = [0; 13];
        for (slot, atom) in atom_label.iter_mut().zip(Atom::ALL) {
            let part = atom.part();
            let children = taxonomy.children(part);
            let by_name = atom.candidates().iter().find_map(|name| {
                children.iter().copied().find(|&c| fine[c] == *name)
            });
            *slot = by_name.or_else(|| children.first().copied()).ok_or_else(|| {
                Error::Invalid(format!(
                    "taxonomy `{}` has no fine label under Level-2 part {part}",
                    taxonomy.name()
                ))
            })?;
        }
        Ok(Self { atom_label })
    }

    fn label(&self, atom: Atom) -> usize {
        self.atom_label[Atom::ALL.iter().position(|&a| a == atom).unwrap()]
    }
}

#[derive(Clone, Copy, Debug)]
struct Point {
    x: f64,
    y: f64,
}

impl Point {
    fn offset(self, len: f64, angle: f64) -> Point {
        // angle measured from straight down, positive towards +x
        Point {
            x: self.x + len * angle.sin(),
            y: self.y + len * angle.cos(),
        }
    }
}

/// A limb segment as a capsule from `a` to `b`.
#[derive(Clone, Copy, Debug)]
struct Segment {
    a: Point,
    b: Point,
    radius: f64,
}

impl Segment {
    /// Position along the segment in `[0, 1]` if `p` is inside the capsule.
    fn hit(&self, p: Point) -> Option<f64> {
        let (dx, dy) = (self.b.x - self.a.x, self.b.y - self.a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.x - self.a.x) * dx + (p.y - self.a.y) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (self.a.x + t * dx, self.a.y + t * dy);
        let d2 = (p.x - cx).powi(2) + (p.y - cy).powi(2);
        (d2 <= self.radius * self.radius).then_some(t)
    }
}

#[derive(Clone, Debug)]
struct Figure {
    head: Point,
    head_radius: f64,
    hat: bool,
    torso_top: f64,
    torso_bottom: f64,
    torso_left: f64,
    torso_right: f64,
    arms: [(Segment, Segment); 2],
    legs: [(Segment, Segment); 2],
    colors: [[f64; 3]; 5],
}

impl Figure {
    fn sample(rng: &mut ChaCha8Rng, height: f64, jitter: f64) -> Figure {
        let mut j = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let head_radius = (0.09 * height * j(0.9, 1.1)).max(1.5);
        let torso_h = 0.30 * height * j(0.9, 1.1);
        let torso_half_w = 0.10 * height * j(0.85, 1.15);
        let upper_arm = 0.17 * height * j(0.85, 1.15);
        let lower_arm = 0.15 * height * j(0.85, 1.15);
        // limbs taper: upper segments are thicker than lower ones
        let arm_r = [(0.06 * height).max(1.6), (0.035 * height).max(1.0)];
        let upper_leg = 0.22 * height * j(0.9, 1.1);
        let lower_leg = 0.21 * height * j(0.9, 1.1);
        let leg_r = [(0.07 * height).max(1.9), (0.04 * height).max(1.0)];
        let shoulder_angle = [j(0.25, 1.7), j(0.25, 1.7)];
        let elbow_bend = [j(-1.2, 1.2), j(-1.2, 1.2)];
        let hip_angle = [j(0.0, 0.5), j(0.0, 0.5)];
        let knee_bend = [j(-0.45, 0.45), j(-0.45, 0.45)];
        let hat = rng.gen_bool(0.5);

        let head = Point { x: 0.0, y: head_radius };
        let torso_top = 2.0 * head_radius + 0.01 * height;
        let torso_bottom = torso_top + torso_h;
        let mut arms = [(zero_segment(), zero_segment()); 2];
        let mut legs = [(zero_segment(), zero_segment()); 2];
        for (side, sign) in [-1.0f64, 1.0].into_iter().enumerate() {
            let shoulder = Point {
                x: sign * torso_half_w * 0.9,
                y: torso_top + 0.04 * height,
            };
            let a1 = sign * shoulder_angle[side];
            let elbow = shoulder.offset(upper_arm, a1);
            let wrist = elbow.offset(lower_arm, a1 + sign * elbow_bend[side]);
            arms[side] = (
                Segment { a: shoulder, b: elbow, radius: arm_r[0] },
                Segment { a: elbow, b: wrist, radius: arm_r[1] },
            );
            let hip = Point {
                x: sign * torso_half_w * 0.55,
                y: torso_bottom - leg_r[0] * 0.5,
            };
            let l1 = sign * hip_angle[side];
            let knee = hip.offset(upper_leg, l1);
            let ankle = knee.offset(lower_leg, l1 + sign * knee_bend[side]);
            legs[side] = (
                Segment { a: hip, b: knee, radius: leg_r[0] },
                Segment { a: knee, b: ankle, radius: leg_r[1] },
            );
        }
        let mut colors = PART_COLORS;
        for c in colors.iter_mut().skip(1) {
            for ch in c.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *ch = (*ch + jitter * n).clamp(0.0, 1.0);
            }
        }
        Figure {
            head,
            head_radius,
            hat,
            torso_top,
            torso_bottom,
            torso_left: -torso_half_w,
            torso_right: torso_half_w,
            arms,
            legs,
            colors,
        }
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)` in figure coordinates.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (
            self.torso_left.min(-self.head_radius),
            0.0f64,
            self.torso_right.max(self.head_radius),
            self.torso_bottom,
        );
        for (s1, s2) in self.arms.iter().chain(&self.legs) {
            for s in [s1, s2] {
                for p in [s.a, s.b] {
                    b.0 = b.0.min(p.x - s.radius);
                    b.1 = b.1.min(p.y - s.radius);
                    b.2 = b.2.max(p.x + s.radius);
                    b.3 = b.3.max(p.y + s.radius);
                }
            }
        }
        b
    }

    /// Atom covering point `p` (figure coordinates), if any. Head over arms
    /// over torso over legs.
    fn atom_at(&self, p: Point) -> Option<Atom> {
        let (dx, dy) = (p.x - self.head.x, p.y - self.head.y);
        let r = self.head_radius;
        if dx * dx + dy * dy <= r * r {
            let rel = dy / r; // -1 top, +1 bottom
            return Some(if self.hat && rel < -0.45 {
                Atom::Hat
            } else if rel < 0.0 {
                Atom::Hair
            } else {
                Atom::Face
            });
        }
        for (upper, lower) in &self.arms {
            if upper.hit(p).is_some() {
                return Some(Atom::UpperArm);
            }
            if let Some(t) = lower.hit(p) {
                return Some(if t > 0.7 { Atom::Hand } else { Atom::LowerArm });
            }
        }
        if p.x >= self.torso_left && p.x <= self.torso_right && p.y >= self.torso_top && p.y <= self.torso_bottom {
            let rel = (p.y - self.torso_top) / (self.torso_bottom - self.torso_top);
            return Some(if rel < 0.2 {
                Atom::Neck
            } else if rel > 0.82 {
                Atom::Belt
            } else {
                Atom::Shirt
            });
        }
        for (upper, lower) in &self.legs {
            if let Some(t) = upper.hit(p) {
                return Some(if t < 0.45 { Atom::Hip } else { Atom::Thigh });
            }
            if let Some(t) = lower.hit(p) {
                return Some(if t > 0.75 { Atom::Shoe } else { Atom::Shin });
            }
        }
        None
    }
}

fn zero_segment() -> Segment {
    let o = Point { x: 0.0, y: 0.0 };
    Segment { a: o, b: o, radius: 0.0 }
}

/// Deterministic per-sample seed.
fn sample_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index))
}

/// Renders sample `index` of the scene family `spec` labelled with
/// `taxonomy`. A pure function of its arguments.
pub fn generate_one(spec: &SceneSpec, taxonomy: &Taxonomy, index: u64) -> Result<Sample> {
    spec.validate()?;
    let palette = Palette::new(taxonomy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let (h, w) = (spec.height, spec.width);
    let figures = rng.gen_range(spec.min_figures..=spec.max_figures);

    let mut background = [0.0; 3];
    for ch in background.iter_mut() {
        *ch = rng.gen_range(0.05..0.3);
    }
    let k3 = taxonomy.num_classes(Level::Three);
    let mut labels = vec![0usize; h * w];
    let mut parts = vec![0usize; h * w];
    let mut rgb: Vec<f64> = (0..h * w).flat_map(|_| background).collect();
    let mut occluded = false;

    let size_scale = if figures > 1 { 0.75 } else { 1.0 };
    for _ in 0..figures {
        let fig_h = h as f64 * spec.figure_scale * size_scale * rng.gen_range(0.8..1.0);
        let figure = Figure::sample(&mut rng, fig_h, spec.palette_jitter);
        let (x0, y0, x1, y1) = figure.bounds();
        let mut origin = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let ox = rng.gen_range(0.0..w as f64);
            let oy = rng.gen_range(0.0..h as f64);
            if ox + x0 >= 0.0 && oy + y0 >= 0.0 && ox + x1 <= w as f64 && oy + y1 <= h as f64 {
                origin = Some((ox, oy));
                break;
            }
        }
        let (ox, oy) = origin.ok_or_else(|| {
            Error::Invalid(format!(
                "figure of height {fig_h:.1} does not fit a {h}x{w} frame after {PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        for y in 0..h {
            for x in 0..w {
                let p = Point {
                    x: x as f64 + 0.5 - ox,
                    y: y as f64 + 0.5 - oy,
                };
                let Some(atom) = figure.atom_at(p) else {
                    continue;
                };
                let i = y * w + x;
                if parts[i] != 0 {
                    occluded = true;
                }
                labels[i] = palette.label(atom);
                parts[i] = atom.part();
                rgb[i * 3..i * 3 + 3].copy_from_slice(&figure.colors[atom.part()]);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in rgb.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * n;
        }
    }
    rgb.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(Sample {
        image: Tensor::new(vec![h, w, 3], rgb)?,
        labels: LabelMap::new(h, w, k3, labels)?,
        parts: LabelMap::new(h, w, 5, parts)?,
        occluded,
    })
}

/// Samples `first..first + count` of the scene family.
pub fn generate_range(spec: &SceneSpec, taxonomy: &Taxonomy, first: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| generate_one(spec, taxonomy, first + i))
        .collect()
}

/// Samples `0..count`.
pub fn generate(spec: &SceneSpec, taxonomy: &Taxonomy, count: usize) -> Result<Vec<Sample>> {
    generate_range(spec, taxonomy, 0, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::builtin_taxonomies;

    #[test]
    fn deterministic_per_seed_and_index() {
        let tax = Taxonomy::builtin("B").unwrap();
        let spec = SceneSpec {
            seed: 11,
            ..SceneSpec::default()
        };
        let a = generate_one(&spec, &tax, 5).unwrap();
        let b = generate_one(&spec, &tax, 5).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        let c = generate_one(&spec, &tax, 6).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn atoms_map_under_their_part() {
        for tax in builtin_taxonomies() {
            let p = Palette::new(&tax).unwrap();
            for atom in Atom::ALL {
                assert_eq!(tax.ancestor(p.label(atom), Level::Two), Some(atom.part()));
            }
        }
        let b = Taxonomy::builtin("B").unwrap();
        let p = Palette::new(&b).unwrap();
        assert_eq!(b.fine_labels()[p.label(Atom::Belt)], "UpperClothes");
        assert_eq!(b.fine_labels()[p.label(Atom::Hand)], "LowerArm");
    }

    #[test]
    fn oversized_figures_fail_to_place() {
        let spec = SceneSpec {
            figure_scale: 3.0,
            ..SceneSpec::default()
        };
        let err = generate_one(&spec, &Taxonomy::builtin("A").unwrap(), 0).unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{err}");
    }

    #[test]
    fn small_frames_rejected() {
        let spec = SceneSpec {
            height: 12,
            ..SceneSpec::default()
        };
        assert!(generate_one(&spec, &Taxonomy::builtin("A").unwrap(), 0).is_err());
    }
}
