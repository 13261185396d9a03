//! Procedural multi-domain segmentation benchmark.
//!
//! Eight visually distinct domains, each pairing a characteristic background
//! texture with its own foreground geometry, plus a generic pretraining
//! mixture (bright blobs / bars / small rings on flat backgrounds) whose
//! parameter ranges stay disjoint from the benchmark domains. The mixture
//! doubles as the out-of-distribution probe at evaluation time.
//!
//! Generation is pure given `(spec, seed)`: the same seed reproduces the
//! same bytes.

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Benchmark images are single-channel 64×64.
pub const IMAGE_SIDE: usize = 64;

const N: usize = IMAGE_SIDE;

/// One image/mask pair. `domain` is the generator family id (1-8), or 0 for
/// the pretraining mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub mask: Mask,
    pub domain: usize,
}

/// The eight generator families, in canonical benchmark order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Cracks,
    Specks,
    Rings,
    GridAnomaly,
    CamoBlob,
    Ellipse,
    StripeDefect,
    TexturePatch,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Cracks,
        Family::Specks,
        Family::Rings,
        Family::GridAnomaly,
        Family::CamoBlob,
        Family::Ellipse,
        Family::StripeDefect,
        Family::TexturePatch,
    ];

    pub fn domain_id(self) -> usize {
        Family::ALL.iter().position(|f| *f == self).unwrap() + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Cracks => "cracks",
            Family::Specks => "specks",
            Family::Rings => "rings",
            Family::GridAnomaly => "grid-anomaly",
            Family::CamoBlob => "camo-blob",
            Family::Ellipse => "ellipse",
            Family::StripeDefect => "stripe-defect",
            Family::TexturePatch => "texture-patch",
        }
    }
}

/// A named closed interval a generator draws one of its parameters from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRange {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    const fn new(name: &'static str, lo: f64, hi: f64) -> Self {
        ParamRange { name, lo, hi }
    }

    pub fn overlaps(&self, other: &ParamRange) -> bool {
        self.name == other.name && self.lo <= other.hi && other.lo <= self.hi
    }
}

// Shape-parameter ranges shared (by name) with the pretraining mixture;
// keeping them disjoint is what makes the benchmark genuinely downstream.
const BENCH_RING_RADIUS: ParamRange = ParamRange::new("ring_radius", 10.0, 16.0);
const BENCH_BLOB_RADIUS: ParamRange = ParamRange::new("blob_radius", 8.0, 11.0);
const BENCH_STRIPE_PERIOD: ParamRange = ParamRange::new("stripe_period", 8.0, 13.0);

const PRE_RING_RADIUS: ParamRange = ParamRange::new("ring_radius", 4.0, 7.0);
const PRE_BLOB_RADIUS: ParamRange = ParamRange::new("blob_radius", 4.0, 7.0);
const PRE_STRIPE_PERIOD: ParamRange = ParamRange::new("stripe_period", 16.0, 24.0);

/// Everything needed to generate one task's data deterministically.
#[derive(Clone, Debug)]
pub struct DomainSpec {
    pub family: Family,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
}

impl DomainSpec {
    /// The shape-parameter intervals this generator draws from, for the
    /// disjointness check against the pretraining mixture.
    pub fn param_ranges(&self) -> Vec<ParamRange> {
        match self.family {
            Family::Cracks => vec![
                ParamRange::new("crack_length", 28.0, 48.0),
                ParamRange::new("background_level", 0.75, 0.88),
            ],
            Family::Specks => vec![
                ParamRange::new("grating_period", 4.0, 6.0),
                ParamRange::new("speck_count", 4.0, 7.0),
            ],
            Family::Rings => vec![BENCH_RING_RADIUS, ParamRange::new("ring_thickness", 2.0, 4.0)],
            Family::GridAnomaly => vec![
                ParamRange::new("grid_pitch", 7.0, 9.0),
                ParamRange::new("anomaly_extent", 9.0, 17.0),
            ],
            Family::CamoBlob => vec![BENCH_BLOB_RADIUS],
            Family::Ellipse => vec![
                ParamRange::new("ellipse_major", 8.0, 14.0),
                ParamRange::new("ellipse_aspect", 1.5, 2.2),
            ],
            Family::StripeDefect => vec![
                BENCH_STRIPE_PERIOD,
                ParamRange::new("defect_extent", 6.0, 12.0),
            ],
            Family::TexturePatch => vec![
                ParamRange::new("patch_extent", 11.0, 19.0),
                ParamRange::new("patch_cell", 4.0, 5.0),
            ],
        }
    }
}

/// Shape-parameter intervals of the pretraining mixture.
pub fn pretrain_param_ranges() -> Vec<ParamRange> {
    vec![PRE_RING_RADIUS, PRE_BLOB_RADIUS, PRE_STRIPE_PERIOD]
}

/// One task: its spec plus disjoint train/test splits.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: DomainSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Ordered task sequence for one continual run.
#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Presentation order of the eight domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskOrder {
    Forward,
    Reversed,
    /// Shuffled by the given seed.
    Permuted(u64),
}

// ── Drawing helpers ──────────────────────────────────────────────────

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn add_noise(img: &mut [f64], rng: &mut ChaCha8Rng, amp: f64) {
    for v in img.iter_mut() {
        *v += uniform(rng, -amp, amp);
    }
}

fn clamp01(img: &mut [f64]) {
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn paint_disc(img: &mut [f64], mask: &mut Mask, cx: f64, cy: f64, r: f64, value: f64) {
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(N - 1));
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(N - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                img[y * N + x] = value;
                mask.set(x, y, true);
            }
        }
    }
}

// ── Domain generators ────────────────────────────────────────────────

fn gen_cracks(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let base = uniform(rng, 0.75, 0.88);
    let mut img = vec![base; N * N];
    add_noise(&mut img, rng, 0.03);
    let mut mask = Mask::new(N, N);

    let dark = uniform(rng, 0.02, 0.1);
    let steps = rng.gen_range(30..48);
    let mut x = uniform(rng, 10.0, 54.0);
    let mut y = uniform(rng, 6.0, 14.0);
    let mut theta = std::f64::consts::FRAC_PI_2 + uniform(rng, -0.4, 0.4);
    for _ in 0..steps {
        theta += uniform(rng, -0.35, 0.35);
        x += theta.cos();
        y += theta.sin();
        if !(2.0..62.0).contains(&x) || !(2.0..62.0).contains(&y) {
            break;
        }
        paint_disc(&mut img, &mut mask, x, y, 2.0, dark);
    }
    // Short escapes near the border could leave a sliver; extend downward.
    while mask.count() < 24 {
        y = (y + 1.0).min(61.0);
        paint_disc(&mut img, &mut mask, x, y, 2.0, dark);
        if y >= 61.0 {
            break;
        }
    }
    (img, mask)
}

fn gen_specks(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let period = uniform(rng, 4.0, 6.0);
    let phase = uniform(rng, 0.0, std::f64::consts::TAU);
    let mut img = vec![0.0; N * N];
    for y in 0..N {
        for x in 0..N {
            img[y * N + x] =
                0.5 + 0.15 * (std::f64::consts::TAU * x as f64 / period + phase).sin();
        }
    }
    add_noise(&mut img, rng, 0.02);
    let mut mask = Mask::new(N, N);
    let ndots = rng.gen_range(4..8);
    let cx = uniform(rng, 14.0, 50.0);
    let cy = uniform(rng, 14.0, 50.0);
    let bright = uniform(rng, 0.9, 1.0);
    for _ in 0..ndots {
        let ang = uniform(rng, 0.0, std::f64::consts::TAU);
        let rad = uniform(rng, 0.0, 9.0);
        let dx = cx + rad * ang.cos();
        let dy = cy + rad * ang.sin();
        let r = uniform(rng, 1.2, 2.2);
        paint_disc(&mut img, &mut mask, dx, dy, r, bright);
    }
    (img, mask)
}

fn gen_rings(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let gx = uniform(rng, 16.0, 48.0);
    let gy = uniform(rng, 16.0, 48.0);
    let mut img = vec![0.0; N * N];
    let maxd = (2.0 * 64.0 * 64.0f64).sqrt();
    for y in 0..N {
        for x in 0..N {
            let d = ((x as f64 - gx).powi(2) + (y as f64 - gy).powi(2)).sqrt();
            img[y * N + x] = 0.25 + 0.35 * d / maxd * 2.0;
        }
    }
    add_noise(&mut img, rng, 0.02);
    let mut mask = Mask::new(N, N);
    let outer = uniform(rng, BENCH_RING_RADIUS.lo, BENCH_RING_RADIUS.hi);
    let thick = uniform(rng, 2.0, 4.0);
    let cx = uniform(rng, outer + 2.0, 62.0 - outer);
    let cy = uniform(rng, outer + 2.0, 62.0 - outer);
    let bright = uniform(rng, 0.85, 1.0);
    for y in 0..N {
        for x in 0..N {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= outer && d >= outer - thick {
                img[y * N + x] = bright;
                mask.set(x, y, true);
            }
        }
    }
    (img, mask)
}

fn gen_grid_anomaly(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let pitch = rng.gen_range(7..10);
    let off = rng.gen_range(0..pitch);
    let mut img = vec![0.62; N * N];
    for y in 0..N {
        for x in 0..N {
            if x % pitch == off || y % pitch == off {
                img[y * N + x] = 0.35;
            }
        }
    }
    let w = rng.gen_range(9..17);
    let h = rng.gen_range(9..17);
    let x0 = rng.gen_range(2..N - w - 2);
    let y0 = rng.gen_range(2..N - h - 2);
    let mut mask = Mask::new(N, N);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img[y * N + x] = uniform(rng, 0.55, 0.85);
            mask.set(x, y, true);
        }
    }
    add_noise(&mut img, rng, 0.015);
    (img, mask)
}

fn gen_camo_blob(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let mut img = vec![0.0; N * N];
    for v in img.iter_mut() {
        *v = uniform(rng, 0.35, 0.65);
    }
    let r = uniform(rng, BENCH_BLOB_RADIUS.lo, BENCH_BLOB_RADIUS.hi);
    let cx = uniform(rng, r + 3.0, 61.0 - r);
    let cy = uniform(rng, r + 3.0, 61.0 - r);
    let wobble = uniform(rng, 0.0, std::f64::consts::TAU);
    let p1 = uniform(rng, 0.0, std::f64::consts::TAU);
    let p2 = uniform(rng, 0.0, std::f64::consts::TAU);
    let mut mask = Mask::new(N, N);
    for y in 0..N {
        for x in 0..N {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d = (dx * dx + dy * dy).sqrt();
            let ang = dy.atan2(dx);
            let edge = r * (1.0 + 0.2 * (3.0 * ang + wobble).sin());
            if d <= edge {
                // Locally smooth interior with a barely shifted mean: the
                // blob hides from per-pixel contrast but not from texture
                // statistics.
                img[y * N + x] = 0.56
                    + 0.05 * (x as f64 / 7.0 + p1).sin() * (y as f64 / 6.0 + p2).cos();
                mask.set(x, y, true);
            }
        }
    }
    (img, mask)
}

fn gen_ellipse(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let mut img = vec![0.0; N * N];
    let half = (N / 2) as f64;
    for y in 0..N {
        for x in 0..N {
            let d = ((x as f64 - half).powi(2) + (y as f64 - half).powi(2)).sqrt();
            img[y * N + x] = 0.12 + 0.12 * (1.0 - d / (half * 1.5));
        }
    }
    add_noise(&mut img, rng, 0.02);
    let a = uniform(rng, 8.0, 14.0);
    let aspect = uniform(rng, 1.5, 2.2);
    let b = a / aspect;
    let theta = uniform(rng, 0.0, std::f64::consts::PI);
    let cx = uniform(rng, 17.0, 47.0);
    let cy = uniform(rng, 17.0, 47.0);
    let bright = uniform(rng, 0.78, 0.9);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut mask = Mask::new(N, N);
    for y in 0..N {
        for x in 0..N {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = dx * ct + dy * st;
            let v = -dx * st + dy * ct;
            let rho = (u / a).powi(2) + (v / b).powi(2);
            if rho <= 1.0 {
                img[y * N + x] = bright + 0.08 * (1.0 - rho);
                mask.set(x, y, true);
            }
        }
    }
    (img, mask)
}

fn gen_stripe_defect(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let period = uniform(rng, BENCH_STRIPE_PERIOD.lo, BENCH_STRIPE_PERIOD.hi);
    let theta = uniform(rng, 0.5, 1.1);
    let (ct, st) = (theta.cos(), theta.sin());
    let phase = uniform(rng, 0.0, std::f64::consts::TAU);
    let mut img = vec![0.0; N * N];
    for y in 0..N {
        for x in 0..N {
            let u = x as f64 * ct + y as f64 * st;
            img[y * N + x] = 0.5 + 0.2 * (std::f64::consts::TAU * u / period + phase).sin();
        }
    }
    add_noise(&mut img, rng, 0.02);
    let ea = uniform(rng, 7.0, 12.0);
    let eb = uniform(rng, 5.0, 8.0);
    let cx = uniform(rng, 15.0, 49.0);
    let cy = uniform(rng, 15.0, 49.0);
    let mut mask = Mask::new(N, N);
    for y in 0..N {
        for x in 0..N {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if (dx / ea).powi(2) + (dy / eb).powi(2) <= 1.0 {
                img[y * N + x] = 0.72;
                mask.set(x, y, true);
            }
        }
    }
    (img, mask)
}

fn gen_texture_patch(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let mut img = vec![0.0; N * N];
    for y in 0..N {
        for x in 0..N {
            img[y * N + x] = if (x / 2 + y / 2) % 2 == 0 { 0.58 } else { 0.44 };
        }
    }
    add_noise(&mut img, rng, 0.02);
    let cell = rng.gen_range(4..6);
    let w = rng.gen_range(11..19);
    let h = rng.gen_range(11..19);
    let x0 = rng.gen_range(2..N - w - 2);
    let y0 = rng.gen_range(2..N - h - 2);
    let mut mask = Mask::new(N, N);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img[y * N + x] = if (x / cell + y / cell) % 2 == 0 { 0.72 } else { 0.3 };
            mask.set(x, y, true);
        }
    }
    (img, mask)
}

fn generate_one(family: Family, rng: &mut ChaCha8Rng) -> Sample {
    let (mut img, mask) = match family {
        Family::Cracks => gen_cracks(rng),
        Family::Specks => gen_specks(rng),
        Family::Rings => gen_rings(rng),
        Family::GridAnomaly => gen_grid_anomaly(rng),
        Family::CamoBlob => gen_camo_blob(rng),
        Family::Ellipse => gen_ellipse(rng),
        Family::StripeDefect => gen_stripe_defect(rng),
        Family::TexturePatch => gen_texture_patch(rng),
    };
    clamp01(&mut img);
    debug_assert!(mask.count() >= 8, "{} mask too small: {}", family.name(), mask.count());
    Sample { image: img, mask, domain: family.domain_id() }
}

/// Generate a domain's train and test splits (disjoint by index partition).
pub fn generate_domain(spec: &DomainSpec) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_count + spec.test_count;
    let all: Vec<Sample> = (0..total).map(|_| generate_one(spec.family, &mut rng)).collect();
    let mut train = all;
    let test = train.split_off(spec.train_count);
    (train, test)
}

use rand::SeedableRng;

/// Build the 8-task benchmark stream for one run seed.
pub fn benchmark_stream(
    seed: u64,
    order: TaskOrder,
    train_count: usize,
    test_count: usize,
) -> TaskStream {
    let mut families: Vec<Family> = Family::ALL.to_vec();
    match order {
        TaskOrder::Forward => {}
        TaskOrder::Reversed => families.reverse(),
        TaskOrder::Permuted(s) => {
            let mut r = rng::rng_for(s, "task-order");
            let idx = rng::shuffled_indices(&mut r, families.len());
            families = idx.into_iter().map(|i| families[i]).collect();
        }
    }
    let tasks = families
        .into_iter()
        .map(|family| {
            let spec = DomainSpec {
                family,
                seed: rng::subseed(seed, &format!("domain{}", family.domain_id())),
                train_count,
                test_count,
            };
            let (train, test) = generate_domain(&spec);
            Task { spec, train, test }
        })
        .collect();
    TaskStream { tasks }
}

/// The generic pretraining mixture; also the out-of-distribution probe.
pub fn generate_pretrain_mix(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let base = uniform(&mut rng, 0.38, 0.55);
            let mut img = vec![base; N * N];
            add_noise(&mut img, &mut rng, 0.03);
            let mut mask = Mask::new(N, N);
            let bright = uniform(&mut rng, 0.8, 0.95);
            match rng.gen_range(0..3) {
                0 => {
                    // compact blob
                    let r = uniform(&mut rng, PRE_BLOB_RADIUS.lo, PRE_BLOB_RADIUS.hi);
                    let cx = uniform(&mut rng, r + 2.0, 62.0 - r);
                    let cy = uniform(&mut rng, r + 2.0, 62.0 - r);
                    paint_disc(&mut img, &mut mask, cx, cy, r, bright);
                }
                1 => {
                    // periodic bright bars
                    let period =
                        uniform(&mut rng, PRE_STRIPE_PERIOD.lo, PRE_STRIPE_PERIOD.hi);
                    let width = period * uniform(&mut rng, 0.25, 0.4);
                    let theta = uniform(&mut rng, 0.0, std::f64::consts::PI);
                    let (ct, st) = (theta.cos(), theta.sin());
                    let phase = uniform(&mut rng, 0.0, period);
                    for y in 0..N {
                        for x in 0..N {
                            let u = x as f64 * ct + y as f64 * st + phase;
                            let frac = u.rem_euclid(period);
                            if frac < width {
                                img[y * N + x] = bright;
                                mask.set(x, y, true);
                            }
                        }
                    }
                }
                _ => {
                    // small ring
                    let outer = uniform(&mut rng, PRE_RING_RADIUS.lo, PRE_RING_RADIUS.hi);
                    let cx = uniform(&mut rng, outer + 2.0, 62.0 - outer);
                    let cy = uniform(&mut rng, outer + 2.0, 62.0 - outer);
                    for y in 0..N {
                        for x in 0..N {
                            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                            if d <= outer && d >= outer - 2.0 {
                                img[y * N + x] = bright;
                                mask.set(x, y, true);
                            }
                        }
                    }
                }
            }
            clamp01(&mut img);
            Sample { image: img, mask, domain: 0 }
        })
        .collect()
}

/// Uniform sample of `m` exemplars without replacement, order-stable in the
/// original dataset order.
pub fn select_exemplars(dataset: &[Sample], m: usize, seed: u64) -> Result<Vec<Sample>> {
    if m > dataset.len() {
        return Err(Error::CapacityExceeded { requested: m, available: dataset.len() });
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rng::shuffled_indices(&mut r, dataset.len());
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| dataset[i].clone()).collect())
}
