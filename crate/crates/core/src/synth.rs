//! Deterministic ray-cast LiDAR scenes with per-point labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, ProjectionConfig};
use crate::par;
use crate::protocol::Frame;
use crate::taxonomy::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sensor {
    pub beams: usize,
    pub azimuth_bins: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub max_range: f64,
    /// Standard deviation of the range noise, metres.
    pub noise_sigma: f64,
    pub intensity_sigma: f64,
}

impl Default for Sensor {
    fn default() -> Self {
        Sensor {
            beams: 16,
            azimuth_bins: 256,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            max_range: 50.0,
            noise_sigma: 0.02,
            intensity_sigma: 0.08,
        }
    }
}

impl Sensor {
    /// Range-image layout with one pixel per ray.
    pub fn projection(&self) -> Result<ProjectionConfig> {
        ProjectionConfig::from_degrees(
            self.azimuth_bins,
            self.beams,
            self.fov_up_deg,
            self.fov_down_deg,
        )
    }

    pub fn ray_count(&self) -> usize {
        self.beams * self.azimuth_bins
    }

    /// Unit direction of ray `index` (beam-major), aimed at its pixel centre.
    pub fn direction(&self, index: usize) -> [f64; 3] {
        let (beam, bin) = (index / self.azimuth_bins, index % self.azimuth_bins);
        let up = self.fov_up_deg.to_radians();
        let fov = up + self.fov_down_deg.to_radians();
        let elevation = up - (beam as f64 + 0.5) * fov / self.beams as f64;
        let azimuth = PI * (1.0 - 2.0 * (bin as f64 + 0.5) / self.azimuth_bins as f64);
        [
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Points `p` with `normal · p = offset`.
    Plane { normal: [f64; 3], offset: f64 },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder with flat caps.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

const EPS: f64 = 1e-9;

impl Shape {
    /// Distance along a unit ray from the origin to the first hit.
    pub fn intersect(&self, d: &[f64; 3]) -> Option<f64> {
        match *self {
            Shape::Plane { normal, offset } => {
                let denom = dot(&normal, d);
                if denom.abs() < EPS {
                    return None;
                }
                let t = offset / denom;
                (t > EPS).then_some(t)
            }
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k].abs() < EPS {
                        if 0.0 < min[k] || 0.0 > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = (min[k] / d[k], max[k] / d[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 || t1 <= EPS {
                    return None;
                }
                Some(if t0 > EPS { t0 } else { t1 })
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let mut best: Option<f64> = None;
                let mut take = |t: f64| {
                    if t > EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                // side: |t d_xy - c|^2 = r^2
                let a = d[0] * d[0] + d[1] * d[1];
                if a > EPS {
                    let b = -2.0 * (d[0] * center[0] + d[1] * center[1]);
                    let c = center[0] * center[0] + center[1] * center[1] - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                            let z = t * d[2];
                            if z >= z_min && z <= z_max {
                                take(t);
                            }
                        }
                    }
                }
                if d[2].abs() > EPS {
                    for zc in [z_min, z_max] {
                        let t = zc / d[2];
                        let (x, y) = (t * d[0] - center[0], t * d[1] - center[1]);
                        if x * x + y * y <= radius * radius {
                            take(t);
                        }
                    }
                }
                best
            }
        }
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub class: ClassId,
    pub shape: Shape,
    /// Mean remission of the surface.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Half-size of the square scene, metres.
    pub extent: f64,
    pub ground_class: ClassId,
    pub ground_height: f64,
    pub ground_intensity: f64,
    pub primitives: Vec<Primitive>,
    pub sensor: Sensor,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        let s = &self.sensor;
        if s.beams == 0 || s.azimuth_bins == 0 {
            return Err(Error::Config(
                "sensor needs at least one beam and bin".into(),
            ));
        }
        if !(s.noise_sigma >= 0.0) || !(s.intensity_sigma >= 0.0) || !(s.max_range > 0.0) {
            return Err(Error::Config(
                "sensor noise must be >= 0 and range > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Casts every ray against the ground and primitives; nearest hit wins.
pub fn generate_scene(spec: &SceneSpec) -> Result<(PointCloud, Vec<ClassId>)> {
    spec.validate()?;
    let sensor = spec.sensor;
    let ground = Primitive {
        class: spec.ground_class,
        shape: Shape::Plane {
            normal: [0.0, 0.0, 1.0],
            offset: spec.ground_height,
        },
        intensity: spec.ground_intensity,
    };
    let range_noise = Normal::new(0.0, sensor.noise_sigma).expect("sigma checked");
    let intensity_noise = Normal::new(0.0, sensor.intensity_sigma).expect("sigma checked");
    let hits: Vec<Option<(Point, ClassId)>> = par::map_range(sensor.ray_count(), |ray| {
        let d = sensor.direction(ray);
        let mut best: Option<(f64, &Primitive)> = None;
        for p in std::iter::once(&ground).chain(&spec.primitives) {
            if let Some(t) = p.shape.intersect(&d) {
                if t <= sensor.max_range && best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, p));
                }
            }
        }
        let (t, prim) = best?;
        let hit = [t * d[0], t * d[1], t * d[2]];
        if hit[0].abs() > spec.extent || hit[1].abs() > spec.extent {
            return None;
        }
        // one stream per ray keeps the noise independent of evaluation order
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(ray as u64);
        let r = (t + range_noise.sample(&mut rng)).max(1e-3);
        let intensity = (prim.intensity + intensity_noise.sample(&mut rng)).clamp(0.0, 1.0);
        Some((
            Point::new(
                (r * d[0]) as f32,
                (r * d[1]) as f32,
                (r * d[2]) as f32,
                intensity as f32,
            ),
            prim.class,
        ))
    });
    let (points, labels): (Vec<Point>, Vec<ClassId>) = hits.into_iter().flatten().unzip();
    if points.is_empty() {
        return Err(Error::NoHits);
    }
    Ok((PointCloud::new(points), labels))
}

/// Classes the street-scene generator draws from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreetClasses {
    pub ground: ClassId,
    pub building: ClassId,
    pub pole: ClassId,
    pub car: ClassId,
    pub person: ClassId,
}

/// Random street scene: road, buildings on both sides, poles, and
/// optionally parked cars and pedestrians.
pub fn street_scene(seed: u64, classes: &StreetClasses, sensor: &Sensor) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prims = Vec::new();
    for side in [-1.0, 1.0] {
        let mut x = -40.0;
        while x < 40.0 {
            let len = rng.random_range(6.0..18.0);
            let near = rng.random_range(7.0..11.0);
            let height = rng.random_range(3.0..9.0);
            if rng.random_bool(0.85) {
                let (y0, y1) = if side > 0.0 {
                    (near, near + 2.0)
                } else {
                    (-near - 2.0, -near)
                };
                prims.push(Primitive {
                    class: classes.building,
                    shape: Shape::Box {
                        min: [x, y0, -1.73],
                        max: [x + len, y1, -1.73 + height],
                    },
                    intensity: 0.45,
                });
            }
            x += len + rng.random_range(0.5..4.0);
        }
        for _ in 0..rng.random_range(1..4) {
            prims.push(Primitive {
                class: classes.pole,
                shape: Shape::Cylinder {
                    center: [
                        rng.random_range(-25.0..25.0),
                        side * rng.random_range(5.0..6.5),
                    ],
                    radius: rng.random_range(0.1..0.25),
                    z_min: -1.73,
                    z_max: -1.73 + rng.random_range(4.0..7.0),
                },
                intensity: 0.6,
            });
        }
    }
    for _ in 0..rng.random_range(0..4) {
        let cx = rng.random_range(4.0..25.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let cy = rng.random_range(-4.5..4.5);
        let (hx, hy) = (rng.random_range(1.9..2.4), rng.random_range(0.8..1.0));
        prims.push(Primitive {
            class: classes.car,
            shape: Shape::Box {
                min: [cx - hx, cy - hy, -1.73],
                max: [cx + hx, cy + hy, -1.73 + rng.random_range(1.3..1.7)],
            },
            intensity: 0.5,
        });
    }
    for _ in 0..rng.random_range(0..3) {
        let cx = rng.random_range(3.0..20.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let cy = rng.random_range(3.0..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        prims.push(Primitive {
            class: classes.person,
            shape: Shape::Cylinder {
                center: [cx, cy],
                radius: rng.random_range(0.25..0.4),
                z_min: -1.73,
                z_max: -1.73 + rng.random_range(1.5..1.9),
            },
            intensity: 0.55,
        });
    }
    SceneSpec {
        seed: seed ^ 0x5eed,
        extent: 50.0,
        ground_class: classes.ground,
        ground_height: -1.73,
        ground_intensity: 0.3,
        primitives: prims,
        sensor: *sensor,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub base_frames: usize,
    pub shot_pool_frames: usize,
    pub eval_frames: usize,
    pub sensor: Sensor,
    pub classes: StreetClasses,
}

/// Three splits with disjoint scene seeds.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub base_train: Vec<Frame>,
    pub shot_pool: Vec<Frame>,
    pub eval: Vec<Frame>,
}

pub const SPLIT_NAMES: [&str; 3] = ["base-train", "shot-pool", "eval"];

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[Frame]); 3] {
        [
            (SPLIT_NAMES[0], &self.base_train),
            (SPLIT_NAMES[1], &self.shot_pool),
            (SPLIT_NAMES[2], &self.eval),
        ]
    }
}

fn scene_seed(corpus_seed: u64, split: u64, index: usize) -> u64 {
    corpus_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split << 40)
        .wrapping_add(index as u64)
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let split = |s: u64, n: usize, name: &str| -> Result<Vec<Frame>> {
        let frames = par::map_range(n, |i| {
            let spec = street_scene(scene_seed(cfg.seed, s, i), &cfg.classes, &cfg.sensor);
            generate_scene(&spec).map(|(cloud, labels)| Frame {
                name: format!("{name}/{i:06}"),
                cloud,
                labels: labels.into_iter().map(Some).collect(),
            })
        });
        frames.into_iter().collect()
    };
    Ok(Corpus {
        base_train: split(0, cfg.base_frames, SPLIT_NAMES[0])?,
        shot_pool: split(1, cfg.shot_pool_frames, SPLIT_NAMES[1])?,
        eval: split(2, cfg.eval_frames, SPLIT_NAMES[2])?,
    })
}
