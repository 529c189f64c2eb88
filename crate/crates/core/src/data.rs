//! Procedural toy domain: cartoon faces with attribute captions, a
//! poster-style filter standing in for an artistic domain, and occluding
//! artifacts for density experiments.

use rand::Rng;

use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HairColor {
    Black,
    Blonde,
    Red,
    Brown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backdrop {
    Blue,
    Green,
    Gray,
    Purple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Skin {
    Pale,
    Tan,
    Deep,
}

impl HairColor {
    pub const ALL: [HairColor; 4] = [HairColor::Black, HairColor::Blonde, HairColor::Red, HairColor::Brown];

    fn rgb(self) -> [f64; 3] {
        match self {
            HairColor::Black => [0.08, 0.07, 0.07],
            HairColor::Blonde => [0.95, 0.82, 0.42],
            HairColor::Red => [0.78, 0.24, 0.08],
            HairColor::Brown => [0.45, 0.28, 0.14],
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            HairColor::Black => "black",
            HairColor::Blonde => "blonde",
            HairColor::Red => "red",
            HairColor::Brown => "brown",
        }
    }
}

impl Backdrop {
    pub const ALL: [Backdrop; 4] = [Backdrop::Blue, Backdrop::Green, Backdrop::Gray, Backdrop::Purple];

    fn rgb(self) -> [f64; 3] {
        match self {
            Backdrop::Blue => [0.32, 0.48, 0.86],
            Backdrop::Green => [0.38, 0.70, 0.40],
            Backdrop::Gray => [0.62, 0.62, 0.62],
            Backdrop::Purple => [0.60, 0.40, 0.76],
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Backdrop::Blue => "blue",
            Backdrop::Green => "green",
            Backdrop::Gray => "gray",
            Backdrop::Purple => "purple",
        }
    }
}

impl Skin {
    pub const ALL: [Skin; 3] = [Skin::Pale, Skin::Tan, Skin::Deep];

    fn rgb(self) -> [f64; 3] {
        match self {
            Skin::Pale => [0.97, 0.84, 0.74],
            Skin::Tan => [0.83, 0.62, 0.44],
            Skin::Deep => [0.50, 0.33, 0.22],
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Skin::Pale => "pale",
            Skin::Tan => "tan",
            Skin::Deep => "deep",
        }
    }
}

/// Everything needed to render one face; the geometry fields act as the
/// face's identity beyond its attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub hair: HairColor,
    pub backdrop: Backdrop,
    pub skin: Skin,
    pub smiling: bool,
    pub glasses: bool,
    pub long_hair: bool,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub eye_dx: f64,
}

impl Face {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            hair: HairColor::ALL[rng.random_range(0..4)],
            backdrop: Backdrop::ALL[rng.random_range(0..4)],
            skin: Skin::ALL[rng.random_range(0..3)],
            smiling: rng.random_bool(0.5),
            glasses: rng.random_bool(0.5),
            long_hair: rng.random_bool(0.5),
            cx: 16.0 + rng.random_range(-1.5..1.5),
            cy: 17.0 + rng.random_range(-1.5..1.5),
            rx: rng.random_range(7.5..9.5),
            ry: rng.random_range(9.0..11.0),
            eye_dx: rng.random_range(3.0..4.0),
        }
    }

    /// Caption tokens for a photographic rendering.
    pub fn caption(&self) -> Vec<&'static str> {
        self.caption_in(Domain::Photo)
    }

    pub fn caption_in(&self, domain: Domain) -> Vec<&'static str> {
        vec![
            "a",
            domain.token(),
            "of",
            "a",
            if self.smiling { "smiling" } else { "neutral" },
            "person",
            "with",
            self.hair.token(),
            "hair",
            self.skin.token(),
            "skin",
            if self.glasses { "glasses" } else { "noglasses" },
            self.backdrop.token(),
            "background",
        ]
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        let bg = self.backdrop.rgb();
        let shade = 1.0 - 0.15 * (y / IMAGE_SIZE as f64);
        let mut c = [bg[0] * shade, bg[1] * shade, bg[2] * shade];

        let inside = |x0: f64, y0: f64, ax: f64, ay: f64| {
            let (u, v) = ((x - x0) / ax, (y - y0) / ay);
            u * u + v * v <= 1.0
        };
        let hair_top = inside(self.cx, self.cy - 0.3 * self.ry, 1.2 * self.rx, 0.95 * self.ry);
        let hair_long = self.long_hair
            && (x - self.cx).abs() <= 1.25 * self.rx
            && y >= self.cy - 0.3 * self.ry
            && y <= self.cy + 0.9 * self.ry;
        if hair_top || hair_long {
            c = self.hair.rgb();
        }
        if inside(self.cx, self.cy + 1.0, self.rx, 0.9 * self.ry) {
            c = self.skin.rgb();
        }
        let ey = self.cy - 1.0;
        for side in [-1.0, 1.0] {
            let ex = self.cx + side * self.eye_dx;
            let d = ((x - ex).powi(2) + (y - ey).powi(2)).sqrt();
            if d <= 1.2 {
                c = [0.10, 0.10, 0.16];
            } else if self.glasses && (d - 2.4).abs() <= 0.55 {
                c = [0.12, 0.12, 0.12];
            }
        }
        if self.glasses && (y - ey).abs() <= 0.45 && (x - self.cx).abs() <= self.eye_dx - 2.3 {
            c = [0.12, 0.12, 0.12];
        }
        let my = self.cy + 0.42 * self.ry;
        let dx = x - self.cx;
        if self.smiling {
            // open grin: lower half-ellipse with a row of teeth
            let (u, v) = (dx / 3.6, (y - my) / 2.4);
            if v >= 0.0 && u * u + v * v <= 1.0 {
                c = if v < 0.35 { [0.96, 0.96, 0.92] } else { [0.55, 0.08, 0.12] };
            }
        } else if dx.abs() <= 2.8 && (y - my - 0.5).abs() <= 0.5 {
            c = [0.62, 0.14, 0.16];
        }
        c
    }

    /// 2x2 supersampled rendering in `[-1, 1]`, shape `[3, 32, 32]`.
    pub fn render(&self) -> Tensor {
        let n = IMAGE_SIZE;
        let mut data = vec![0.0; 3 * n * n];
        for py in 0..n {
            for px in 0..n {
                let mut acc = [0.0; 3];
                for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let c = self.color_at(px as f64 + ox, py as f64 + oy);
                    (0..3).for_each(|k| acc[k] += c[k] / 4.0);
                }
                for (k, a) in acc.iter().enumerate() {
                    data[k * n * n + py * n + px] = 2.0 * a - 1.0;
                }
            }
        }
        Tensor::new(&[3, n, n], data).expect("rendered image shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Photo,
    Poster,
}

impl Domain {
    pub fn token(self) -> &'static str {
        match self {
            Domain::Photo => "photo",
            Domain::Poster => "poster",
        }
    }
}

fn to_unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

fn luminance(img: &[f64], n: usize, i: usize) -> f64 {
    0.3 * to_unit(img[i]) + 0.59 * to_unit(img[n * n + i]) + 0.11 * to_unit(img[2 * n * n + i])
}

/// Parameters of the poster filter that defines the artistic domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PosterStyle {
    pub levels: usize,
    pub dark: [f64; 3],
    pub light: [f64; 3],
    /// Weight of the duotone against the posterized colors.
    pub tint: f64,
    pub edge_threshold: f64,
    pub hatch_period: usize,
}

impl Default for PosterStyle {
    fn default() -> Self {
        Self {
            levels: 4,
            dark: [0.18, 0.05, 0.32],
            light: [1.0, 0.86, 0.40],
            tint: 0.55,
            edge_threshold: 0.12,
            hatch_period: 4,
        }
    }
}

impl PosterStyle {
    /// Posterize, duotone tint, dark outlines on luminance edges and
    /// diagonal hatching in the shadows.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let n = image.shape()[1];
        let src = image.data();
        let q = (self.levels.max(2) - 1) as f64;
        let mut out = vec![0.0; src.len()];
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let lum = luminance(src, n, i);
                let gx = if x + 1 < n { luminance(src, n, i + 1) - lum } else { 0.0 };
                let gy = if y + 1 < n { luminance(src, n, i + n) - lum } else { 0.0 };
                let edge = (gx * gx + gy * gy).sqrt() > self.edge_threshold;
                let hatch = lum < 0.45 && (x + y) % self.hatch_period == 0;
                for k in 0..3 {
                    let post = (to_unit(src[k * n * n + i]) * q).round() / q;
                    let duo = self.dark[k] + (self.light[k] - self.dark[k]) * lum;
                    let mut v = (1.0 - self.tint) * post + self.tint * duo;
                    if hatch {
                        v *= 0.55;
                    }
                    if edge {
                        v = 0.06;
                    }
                    out[k * n * n + i] = 2.0 * v - 1.0;
                }
            }
        }
        Tensor::new(image.shape(), out).expect("same shape")
    }
}

/// Mild photometric jitter that keeps the depicted identity.
pub fn jitter<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Tensor {
    let gain = rng.random_range(0.85..1.15);
    let shift: [f64; 3] = [
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
    ];
    let plane = image.numel() / 3;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v * gain + shift[i / plane]).clamp(-1.0, 1.0))
        .collect();
    Tensor::new(image.shape(), data).expect("same shape")
}

/// Paints one or two opaque checkered rectangles over the image.
pub fn occlude<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Tensor {
    let n = image.shape()[1];
    let mut data = image.data().to_vec();
    for _ in 0..rng.random_range(1..=2) {
        let (w, h) = (rng.random_range(8..14), rng.random_range(8..14));
        let (x0, y0) = (rng.random_range(0..n - w), rng.random_range(0..n - h));
        let a: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let b: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let c = if (x / 2 + y / 2) % 2 == 0 { a } else { b };
                for k in 0..3 {
                    data[k * n * n + y * n + x] = c[k];
                }
            }
        }
    }
    Tensor::new(image.shape(), data).expect("same shape")
}

/// `n` rendered photographic faces.
pub fn face_corpus<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Tensor> {
    (0..n).map(|_| Face::sample(rng).render()).collect()
}

/// A corpus whose odd entries carry occluding artifacts; the flag marks them.
pub fn artifact_corpus<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<(Tensor, bool)> {
    (0..n)
        .map(|i| {
            let img = Face::sample(rng).render();
            if i % 2 == 1 {
                (occlude(&img, rng), true)
            } else {
                (img, false)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn renders_are_in_range_and_vary() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Face::sample(&mut rng).render();
        let b = Face::sample(&mut rng).render();
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.mean_abs_diff(&b) > 0.01);
    }

    #[test]
    fn poster_filter_changes_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Face::sample(&mut rng).render();
        let p = PosterStyle::default().apply(&a);
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.mean_abs_diff(&p) > 0.1);
    }

    #[test]
    fn artifact_corpus_alternates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = artifact_corpus(6, &mut rng);
        assert_eq!(c.iter().filter(|(_, a)| *a).count(), 3);
    }
}
