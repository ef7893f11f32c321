use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded deterministic generator. Never global: every consumer owns one.
///
/// Normals come from Box–Muller so the draw sequence depends only on the
/// underlying uniform stream.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
    draws: u64,
}

/// SplitMix64 finalizer, used to derive independent substream seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
            draws: 0,
        }
    }

    /// Generator for a labelled substream, e.g. `(seed, [epoch, conversation])`.
    /// Distinct paths give statistically independent streams.
    pub fn substream(seed: u64, path: &[u64]) -> Self {
        let mut s = mix64(seed);
        for &p in path {
            s = mix64(s ^ mix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
        }
        Self::new(s)
    }

    /// Number of primitive draws taken so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        // Rejection sampling keeps the draw unbiased.
        let zone = u64::MAX - u64::MAX % span;
        loop {
            let x = self.next_u64();
            if x < zone {
                return lo + (x % span) as usize;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.range_inclusive(0, n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Source of the standard-normal and uniform noise consumed by the stochastic
/// parts of a forward pass.
pub trait NoiseSource {
    fn normal(&mut self) -> f64;
    fn uniform(&mut self) -> f64;
}

impl NoiseSource for Rng {
    fn normal(&mut self) -> f64 {
        Rng::normal(self)
    }
    fn uniform(&mut self) -> f64 {
        Rng::uniform(self)
    }
}

/// All normal draws are zero and all uniforms are one half: the noiseless pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn normal(&mut self) -> f64 {
        0.0
    }
    fn uniform(&mut self) -> f64 {
        0.5
    }
}

/// Records every draw of the wrapped source so it can be replayed.
pub struct RecordingNoise<'a> {
    inner: &'a mut dyn NoiseSource,
    pub tape: Vec<f64>,
}

impl<'a> RecordingNoise<'a> {
    pub fn new(inner: &'a mut dyn NoiseSource) -> Self {
        Self {
            inner,
            tape: Vec::new(),
        }
    }
}

impl NoiseSource for RecordingNoise<'_> {
    fn normal(&mut self) -> f64 {
        let z = self.inner.normal();
        self.tape.push(z);
        z
    }
    fn uniform(&mut self) -> f64 {
        let u = self.inner.uniform();
        self.tape.push(u);
        u
    }
}

/// Replays a recorded draw sequence; this is how noise is frozen for
/// gradient checking.
#[derive(Clone, Debug)]
pub struct ReplayNoise {
    tape: Vec<f64>,
    pos: usize,
}

impl ReplayNoise {
    pub fn new(tape: Vec<f64>) -> Self {
        Self { tape, pos: 0 }
    }

    fn next(&mut self) -> f64 {
        let v = self
            .tape
            .get(self.pos)
            .copied()
            .expect("replay tape exhausted: forward pass drew more noise than recorded");
        self.pos += 1;
        v
    }
}

impl NoiseSource for ReplayNoise {
    fn normal(&mut self) -> f64 {
        self.next()
    }
    fn uniform(&mut self) -> f64 {
        self.next()
    }
}

/// Counts draws without producing randomness; used to assert that a code
/// path is noise-free.
#[derive(Debug, Default)]
pub struct CountingNoise {
    pub count: usize,
}

impl NoiseSource for CountingNoise {
    fn normal(&mut self) -> f64 {
        self.count += 1;
        0.0
    }
    fn uniform(&mut self) -> f64 {
        self.count += 1;
        0.5
    }
}
