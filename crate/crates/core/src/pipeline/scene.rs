//! Procedural scenes of rigidly moving objects with exact ground-truth flow.

use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

type Mat3 = [[f64; 3]; 3];

/// `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    /// Rotation by `angle` radians about the unit `axis` (Rodrigues).
    pub fn rotation(axis: [f64; 3], angle: f64) -> Self {
        let [x, y, z] = normalize(axis);
        let (s, c) = (math::sin(angle), math::cos(angle));
        let t = 1.0 - c;
        RigidTransform {
            rotation: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        RigidTransform {
            translation: t,
            ..Self::IDENTITY
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        core::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    /// Rotation about `pivot` instead of the origin, followed by `t`.
    fn about(pivot: [f64; 3], rot: RigidTransform, t: [f64; 3]) -> Self {
        let rc = rot.apply(pivot);
        RigidTransform {
            rotation: rot.rotation,
            translation: core::array::from_fn(|i| pivot[i] - rc[i] + t[i]),
        }
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// How each object moves between the two frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformFamily {
    Identity,
    /// Random direction, fixed length.
    Translation {
        magnitude: f64,
    },
    /// Rotation about the origin; a random axis per object when `axis` is
    /// `None`.
    Rotation {
        angle_deg: f64,
        axis: Option<[f64; 3]>,
    },
    /// Random rotation about the object's center (angle up to the bound)
    /// plus a random translation of length up to the bound.
    Rigid {
        max_angle_deg: f64,
        max_translation: f64,
    },
}

impl TransformFamily {
    /// Parses `identity`, `translate`, `translate:<m>`, `rotate30`,
    /// `rotate:<deg>` and `rigid`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown transform family `{s}`"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match s {
            "identity" => Ok(TransformFamily::Identity),
            "translate" => Ok(TransformFamily::Translation { magnitude: 0.5 }),
            "rotate30" => Ok(TransformFamily::Rotation {
                angle_deg: 30.0,
                axis: Some([0.0, 0.0, 1.0]),
            }),
            "rigid" => Ok(TransformFamily::Rigid {
                max_angle_deg: 10.0,
                max_translation: 0.5,
            }),
            _ => match s.split_once(':') {
                Some(("translate", m)) => Ok(TransformFamily::Translation { magnitude: num(m)? }),
                Some(("rotate", d)) => Ok(TransformFamily::Rotation {
                    angle_deg: num(d)?,
                    axis: Some([0.0, 0.0, 1.0]),
                }),
                _ => Err(bad()),
            },
        }
    }
}

/// Largest rotation any family may apply, in degrees.
pub const MAX_ROTATION_DEG: f64 = 30.0;
/// Largest translation any family may apply.
pub const MAX_TRANSLATION: f64 = 0.5;
pub const MIN_POINTS_PER_OBJECT: usize = 4;

impl TransformFamily {
    fn validate(&self) -> Result<()> {
        let (angle, shift) = match *self {
            TransformFamily::Identity => (0.0, 0.0),
            TransformFamily::Translation { magnitude } => (0.0, magnitude),
            TransformFamily::Rotation { angle_deg, axis } => {
                if let Some(a) = axis {
                    if !(a.iter().map(|v| v * v).sum::<f64>() > 0.0) {
                        return Err(Error::Config("rotation axis must be non-zero".into()));
                    }
                }
                (angle_deg, 0.0)
            }
            TransformFamily::Rigid {
                max_angle_deg,
                max_translation,
            } => (max_angle_deg, max_translation),
        };
        if !(0.0..=MAX_ROTATION_DEG).contains(&angle.abs()) {
            return Err(Error::Config(format!(
                "rotation of {angle} degrees exceeds {MAX_ROTATION_DEG}"
            )));
        }
        if !(0.0..=MAX_TRANSLATION).contains(&shift) {
            return Err(Error::Config(format!(
                "translation of {shift} outside [0, {MAX_TRANSLATION}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectShape {
    /// Points on the surface of a box.
    Box,
    /// A flat rectangle in a random orientation.
    Plane,
    /// A thin cylinder.
    Rod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: usize,
    /// Source points per object.
    pub points_per_object: usize,
    pub family: TransformFamily,
    /// Standard deviation of Gaussian noise added to the target frame.
    pub noise: f64,
    /// Fraction of target points dropped.
    pub occlusion: f64,
    /// Object centers lie in `[-extent, extent]³`; object sizes scale with it.
    pub extent: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            objects: 3,
            points_per_object: 86,
            family: TransformFamily::Rigid {
                max_angle_deg: 10.0,
                max_translation: 0.5,
            },
            noise: 0.0,
            occlusion: 0.0,
            extent: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub source: Tensor,
    pub target: Tensor,
    /// Ground-truth flow per source point.
    pub flow: Tensor,
    /// Object index of every source point.
    pub object_of: Vec<usize>,
    pub shapes: Vec<ObjectShape>,
    pub transforms: Vec<RigidTransform>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.source.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.source.rows() == 0
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-4 && n2 <= 1.0 {
            return normalize(v);
        }
    }
}

/// One point in the object's local frame, centered at the origin.
fn sample_local<R: Rng + ?Sized>(shape: ObjectShape, size: [f64; 3], rng: &mut R) -> [f64; 3] {
    let u = |rng: &mut R, half: f64| rng.random_range(-half..half);
    match shape {
        ObjectShape::Box => {
            let face = rng.random_range(0..6usize);
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            core::array::from_fn(|i| if i == axis { sign * size[i] } else { u(rng, size[i]) })
        }
        ObjectShape::Plane => [u(rng, size[0]), u(rng, size[1]), 0.0],
        ObjectShape::Rod => {
            let theta = rng.random_range(0.0..core::f64::consts::TAU);
            let r = 0.05 * size[1];
            [u(rng, 2.0 * size[0]), r * math::cos(theta), r * math::sin(theta)]
        }
    }
}

/// Generates a scene; the same `(spec, seed)` always yields the same scene.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    if spec.objects == 0 || spec.points_per_object < MIN_POINTS_PER_OBJECT {
        return Err(Error::Config(format!(
            "a scene needs at least one object with {MIN_POINTS_PER_OBJECT} points"
        )));
    }
    spec.family.validate()?;
    if !(0.0..1.0).contains(&spec.occlusion) || !(spec.noise >= 0.0) || !(spec.extent > 0.0) {
        return Err(Error::Config(
            "occlusion must lie in [0, 1), noise must be non-negative and extent positive".into(),
        ));
    }
    let ext = spec.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes_cycle = [ObjectShape::Box, ObjectShape::Plane, ObjectShape::Rod];
    let n = spec.objects * spec.points_per_object;
    let mut source = Vec::with_capacity(n * 3);
    let mut moved = Vec::with_capacity(n * 3);
    let mut object_of = Vec::with_capacity(n);
    let mut shapes = Vec::with_capacity(spec.objects);
    let mut transforms = Vec::with_capacity(spec.objects);
    for obj in 0..spec.objects {
        let shape = shapes_cycle[obj % shapes_cycle.len()];
        let center: [f64; 3] = core::array::from_fn(|_| rng.random_range(-ext..ext));
        let size: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.2 * ext..0.45 * ext));
        let orient = RigidTransform::rotation(random_unit(&mut rng), rng.random_range(0.0..core::f64::consts::PI));
        let motion = match spec.family {
            TransformFamily::Identity => RigidTransform::IDENTITY,
            TransformFamily::Translation { magnitude } => {
                let d = random_unit(&mut rng);
                RigidTransform::translation([d[0] * magnitude, d[1] * magnitude, d[2] * magnitude])
            }
            TransformFamily::Rotation { angle_deg, axis } => {
                let axis = axis.unwrap_or_else(|| random_unit(&mut rng));
                RigidTransform::rotation(axis, angle_deg.to_radians())
            }
            TransformFamily::Rigid {
                max_angle_deg,
                max_translation,
            } => {
                let angle = rng.random_range(0.0..=max_angle_deg).to_radians();
                let rot = RigidTransform::rotation(random_unit(&mut rng), angle);
                let d = random_unit(&mut rng);
                let len = max_translation * rng.random_range(0.0..=1.0f64);
                RigidTransform::about(center, rot, [d[0] * len, d[1] * len, d[2] * len])
            }
        };
        for _ in 0..spec.points_per_object {
            let local = orient.apply(sample_local(shape, size, &mut rng));
            let p: [f64; 3] = core::array::from_fn(|i| local[i] + center[i]);
            source.extend_from_slice(&p);
            moved.extend_from_slice(&motion.apply(p));
            object_of.push(obj);
        }
        shapes.push(shape);
        transforms.push(motion);
    }
    // Interleave the objects so that row order carries no grouping.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let permute = |v: &[f64]| -> Vec<f64> {
        order
            .iter()
            .flat_map(|&r| v[r * 3..r * 3 + 3].iter().copied())
            .collect()
    };
    let (source, mut moved) = (permute(&source), permute(&moved));
    let object_of: Vec<usize> = order.iter().map(|&r| object_of[r]).collect();
    let flow: Vec<f64> = moved.iter().zip(&source).map(|(m, s)| m - s).collect();
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
        for v in &mut moved {
            *v += normal.sample(&mut rng);
        }
    }
    let target = if spec.occlusion > 0.0 {
        let keep = libm::round((1.0 - spec.occlusion) * n as f64).max(1.0) as usize;
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        rows.truncate(keep);
        rows.sort_unstable();
        rows.iter()
            .flat_map(|&r| moved[r * 3..r * 3 + 3].iter().copied())
            .collect()
    } else {
        moved
    };
    let n2 = target.len() / 3;
    Ok(SyntheticScene {
        source: Tensor::new(&[n, 3], source)?,
        target: Tensor::new(&[n2, 3], target)?,
        flow: Tensor::new(&[n, 3], flow)?,
        object_of,
        shapes,
        transforms,
        seed,
    })
}
