//! Seeded synthetic visual-dialog task.
//!
//! Each image is a `size × size` RGB canvas split into a `grid × grid` lattice.
//! Two to four shapes of distinct kinds and colors occupy distinct cells over
//! a faint positional backdrop (red ramps left to right, green top to bottom)
//! so that location questions are answerable by a small conv net. Every
//! round asks one templated question about the scene; the candidate list
//! holds the ground truth, one paraphrase and distractors drawn first from
//! the same answer family.

use super::{RawDialog, RawRound};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether local pixel `(x, y)` of a `cell`-sized tile is inked.
    fn covers(self, x: usize, y: usize, cell: usize) -> bool {
        let c = (cell as f64 - 1.0) / 2.0;
        let r = cell as f64 / 2.0 - 1.0;
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r - 0.5 && dy.abs() <= r - 0.5,
            ShapeKind::Triangle => {
                let top = c - r;
                dy >= top - c && dy <= r && dx.abs() <= (dy + r) / 2.0
            }
            ShapeKind::Cross => {
                (dx.abs() <= 0.6 && dy.abs() <= r) || (dy.abs() <= 0.6 && dx.abs() <= r)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Color {
    pub name: String,
    pub rgb: [f64; 3],
}

fn default_colors() -> Vec<Color> {
    [
        ("red", [0.9, 0.1, 0.1]),
        ("green", [0.1, 0.8, 0.1]),
        ("blue", [0.1, 0.2, 0.9]),
        ("yellow", [0.9, 0.9, 0.1]),
        ("purple", [0.6, 0.1, 0.8]),
        ("white", [0.95, 0.95, 0.95]),
    ]
    .into_iter()
    .map(|(n, rgb)| Color {
        name: n.to_string(),
        rgb,
    })
    .collect()
}

const NUMBERS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];
const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    pub num_dialogs: usize,
    pub rounds_per_dialog: usize,
    pub num_candidates: usize,
    pub grid: usize,
    pub image_size: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<Color>,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// multiplicative pixel factor; also drives question-token noise
    pub noise_gamma: f64,
    pub paraphrase_relevance: f64,
    /// added to the dialog index to form dialog ids
    pub id_offset: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            seed: 7,
            num_dialogs: 500,
            rounds_per_dialog: 5,
            num_candidates: 20,
            grid: 4,
            image_size: 32,
            shapes: ShapeKind::ALL.to_vec(),
            colors: default_colors(),
            min_shapes: 2,
            max_shapes: 4,
            noise_gamma: 1.0,
            paraphrase_relevance: 0.5,
            id_offset: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("shape and color inventories must be non-empty".into());
        }
        if self.num_candidates < 2 {
            return bad(format!(
                "num_candidates must be >= 2, got {}",
                self.num_candidates
            ));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad(format!(
                "bad shape count range {}..={}",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.max_shapes > self.grid * self.grid {
            return bad(format!(
                "{} shapes do not fit in a {}x{} grid",
                self.max_shapes, self.grid, self.grid
            ));
        }
        if self.max_shapes > self.shapes.len() || self.max_shapes > self.colors.len() {
            return bad(format!(
                "{} shapes need as many distinct kinds and colors ({} / {})",
                self.max_shapes,
                self.shapes.len(),
                self.colors.len()
            ));
        }
        if self.grid == 0 || self.image_size % self.grid != 0 || self.image_size / self.grid < 4 {
            return bad(format!(
                "image size {} incompatible with grid {}",
                self.image_size, self.grid
            ));
        }
        if !(1..=super::MAX_ROUNDS).contains(&self.rounds_per_dialog) {
            return bad(format!(
                "rounds per dialog must be in 1..=10, got {}",
                self.rounds_per_dialog
            ));
        }
        if !(self.noise_gamma >= 0.0) {
            return bad(format!(
                "noise_gamma must be non-negative, got {}",
                self.noise_gamma
            ));
        }
        Ok(())
    }

    /// Probability of replacing each question token.
    pub fn question_noise(&self) -> f64 {
        (1.0 - self.noise_gamma).clamp(0.0, 0.3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: usize,
    pub row: usize,
    pub col: usize,
}

/// Symbolic content of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn find_shape(&self, s: ShapeKind) -> Option<&Object> {
        self.objects.iter().find(|o| o.shape == s)
    }

    pub fn find_color(&self, c: usize) -> Option<&Object> {
        self.objects.iter().find(|o| o.color == c)
    }
}

/// Question templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    ColorOf(ShapeKind),
    ShapeOf(usize),
    Count,
    Exists(ShapeKind),
    Location(ShapeKind),
}

const SCENE_KEY: u64 = 0x5CE7E;
const QUESTION_KEY: u64 = 0x0A5C;
const NOISE_KEY: u64 = 0x7015E;

/// Scene of the dialog with id `index` under `spec`'s seed.
pub fn gen_scene(spec: &SyntheticTaskSpec, index: usize) -> Scene {
    let mut rng = RngStream::new(spec.seed)
        .substream(SCENE_KEY)
        .substream(index as u64);
    let n = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
    let mut shapes = spec.shapes.clone();
    rng.shuffle(&mut shapes);
    let mut colors: Vec<usize> = (0..spec.colors.len()).collect();
    rng.shuffle(&mut colors);
    let mut cells: Vec<usize> = (0..spec.grid * spec.grid).collect();
    rng.shuffle(&mut cells);
    let objects = (0..n)
        .map(|i| Object {
            shape: shapes[i],
            color: colors[i],
            row: cells[i] / spec.grid,
            col: cells[i] % spec.grid,
        })
        .collect();
    Scene { objects }
}

/// Noiseless `[3, size, size]` rendering of `scene`.
pub fn render(spec: &SyntheticTaskSpec, scene: &Scene) -> Tensor {
    let s = spec.image_size;
    let cell = s / spec.grid;
    let mut img = Tensor::zeros(&[3, s, s]);
    let d = img.data_mut();
    let denom = (s - 1).max(1) as f64;
    for y in 0..s {
        for x in 0..s {
            d[y * s + x] = 0.15 * x as f64 / denom;
            d[s * s + y * s + x] = 0.15 * y as f64 / denom;
            d[2 * s * s + y * s + x] = 0.05;
        }
    }
    for o in &scene.objects {
        let rgb = spec.colors[o.color].rgb;
        for ly in 0..cell {
            for lx in 0..cell {
                if o.shape.covers(lx, ly, cell) {
                    let (y, x) = (o.row * cell + ly, o.col * cell + lx);
                    for (ch, v) in rgb.iter().enumerate() {
                        d[ch * s * s + y * s + x] = *v;
                    }
                }
            }
        }
    }
    img
}

fn quadrant(spec: &SyntheticTaskSpec, o: &Object) -> &'static str {
    let half = spec.grid / 2;
    let top = o.row < half.max(1);
    let left = o.col < half.max(1);
    match (top, left) {
        (true, true) => QUADRANTS[0],
        (true, false) => QUADRANTS[1],
        (false, true) => QUADRANTS[2],
        (false, false) => QUADRANTS[3],
    }
}

pub fn question_text(spec: &SyntheticTaskSpec, q: Question) -> String {
    match q {
        Question::ColorOf(s) => format!("what color is the {}", s.name()),
        Question::ShapeOf(c) => format!("what shape is the {} one", spec.colors[c].name),
        Question::Count => "how many shapes are there".to_string(),
        Question::Exists(s) => format!("is there a {}", s.name()),
        Question::Location(s) => format!("where is the {}", s.name()),
    }
}

/// The answer family of a question type, as `(primary, paraphrase)` pairs;
/// the first returned index is the true value.
fn answer_family(
    spec: &SyntheticTaskSpec,
    scene: &Scene,
    q: Question,
) -> (usize, Vec<(String, String)>) {
    match q {
        Question::ColorOf(s) => {
            let truth = scene
                .find_shape(s)
                .expect("asked about a present shape")
                .color;
            let fam = spec
                .colors
                .iter()
                .map(|c| {
                    (
                        format!("it is {}", c.name),
                        format!("the color is {}", c.name),
                    )
                })
                .collect();
            (truth, fam)
        }
        Question::ShapeOf(c) => {
            let truth_shape = scene
                .find_color(c)
                .expect("asked about a present color")
                .shape;
            let truth = spec
                .shapes
                .iter()
                .position(|&s| s == truth_shape)
                .expect("shape in inventory");
            let fam = spec
                .shapes
                .iter()
                .map(|s| {
                    (
                        format!("it is a {}", s.name()),
                        format!("the shape is a {}", s.name()),
                    )
                })
                .collect();
            (truth, fam)
        }
        Question::Count => {
            let hi = (spec.max_shapes + 2).min(NUMBERS.len() - 1);
            let fam = (1..=hi)
                .map(|n| {
                    (
                        format!("there are {}", NUMBERS[n]),
                        format!("{} shapes", NUMBERS[n]),
                    )
                })
                .collect();
            (scene.objects.len() - 1, fam)
        }
        Question::Exists(s) => {
            let fam = vec![
                ("yes there is".to_string(), "yes".to_string()),
                ("no there is not".to_string(), "no".to_string()),
            ];
            (if scene.find_shape(s).is_some() { 0 } else { 1 }, fam)
        }
        Question::Location(s) => {
            let o = scene.find_shape(s).expect("asked about a present shape");
            let truth = QUADRANTS
                .iter()
                .position(|&x| x == quadrant(spec, o))
                .expect("quadrant");
            let fam = QUADRANTS
                .iter()
                .map(|x| (format!("it is in the {x}"), format!("the {x} corner")))
                .collect();
            (truth, fam)
        }
    }
}

/// Ground-truth answer text for `q` on `scene`.
pub fn answer_text(spec: &SyntheticTaskSpec, scene: &Scene, q: Question) -> String {
    let (i, fam) = answer_family(spec, scene, q);
    fam[i].0.clone()
}

fn all_answers(spec: &SyntheticTaskSpec) -> Vec<String> {
    let dummy = Scene {
        objects: vec![Object {
            shape: spec.shapes[0],
            color: 0,
            row: 0,
            col: 0,
        }],
    };
    let qs = [
        Question::ColorOf(spec.shapes[0]),
        Question::ShapeOf(0),
        Question::Count,
        Question::Exists(spec.shapes[0]),
        Question::Location(spec.shapes[0]),
    ];
    qs.iter()
        .flat_map(|&q| {
            answer_family(spec, &dummy, q)
                .1
                .into_iter()
                .flat_map(|(a, b)| [a, b])
        })
        .collect()
}

fn pick_question(rng: &mut RngStream, spec: &SyntheticTaskSpec, scene: &Scene) -> Question {
    let present = |rng: &mut RngStream| scene.objects[rng.below(scene.objects.len())];
    match rng.below(5) {
        0 => Question::ColorOf(present(rng).shape),
        1 => Question::ShapeOf(present(rng).color),
        2 => Question::Count,
        3 => Question::Exists(spec.shapes[rng.below(spec.shapes.len())]),
        _ => Question::Location(present(rng).shape),
    }
}

/// Lexicon used for question-token replacement.
fn lexicon(spec: &SyntheticTaskSpec) -> Vec<String> {
    let mut words: Vec<String> = spec
        .shapes
        .iter()
        .map(|s| s.name().to_string())
        .chain(spec.colors.iter().map(|c| c.name.clone()))
        .chain(
            [
                "what", "is", "the", "where", "how", "many", "there", "a", "shape", "color",
            ]
            .map(String::from),
        )
        .collect();
    words.sort();
    words.dedup();
    words
}

fn noisy_question(text: &str, p: f64, words: &[String], rng: &mut RngStream) -> String {
    if p <= 0.0 {
        return text.to_string();
    }
    text.split(' ')
        .map(|w| {
            if rng.bernoulli(p) {
                words[rng.below(words.len())].as_str()
            } else {
                w
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn candidates(
    spec: &SyntheticTaskSpec,
    rng: &mut RngStream,
    truth: usize,
    family: &[(String, String)],
    pool: &[String],
) -> (Vec<String>, usize, Vec<f64>) {
    let n = spec.num_candidates;
    let gt = family[truth].0.clone();
    let para = family[truth].1.clone();
    let mut same: Vec<String> = family
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != truth)
        .flat_map(|(_, (a, b))| [a.clone(), b.clone()])
        .collect();
    rng.shuffle(&mut same);
    let mut list = vec![(gt.clone(), 1.0)];
    if n > 1 {
        list.push((para, spec.paraphrase_relevance));
    }
    for s in same {
        if list.len() >= n {
            break;
        }
        list.push((s, 0.0));
    }
    let mut rest: Vec<&String> = pool
        .iter()
        .filter(|a| !list.iter().any(|(x, _)| x == *a))
        .collect();
    rng.shuffle(&mut rest);
    for s in rest {
        if list.len() >= n {
            break;
        }
        list.push((s.clone(), 0.0));
    }
    rng.shuffle(&mut list);
    let gt_index = list.iter().position(|(x, _)| *x == gt).expect("gt present");
    let (texts, rel) = list.into_iter().unzip();
    (texts, gt_index, rel)
}

fn number_word(n: usize) -> &'static str {
    NUMBERS.get(n).copied().unwrap_or("many")
}

/// Generates `spec.num_dialogs` dialogs; identical specs give identical output.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<Vec<RawDialog>> {
    spec.validate()?;
    let pool = all_answers(spec);
    let words = lexicon(spec);
    let noise_p = spec.question_noise();
    let mut out = Vec::with_capacity(spec.num_dialogs);
    for i in 0..spec.num_dialogs {
        let key = spec.id_offset + i as u64;
        let scene = gen_scene(spec, key as usize);
        let mut qrng = RngStream::new(spec.seed)
            .substream(QUESTION_KEY)
            .substream(key);
        let mut nrng = RngStream::new(spec.seed)
            .substream(NOISE_KEY)
            .substream(key);
        let mut img = render(spec, &scene);
        if spec.noise_gamma != 1.0 {
            img.data_mut()
                .iter_mut()
                .for_each(|v| *v *= spec.noise_gamma);
        }
        let first = &scene.objects[0];
        let caption = format!(
            "a picture with {} shapes including a {} {}",
            number_word(scene.objects.len()),
            spec.colors[first.color].name,
            first.shape.name()
        );
        let rounds = (0..spec.rounds_per_dialog)
            .map(|_| {
                let q = pick_question(&mut qrng, spec, &scene);
                let (truth, family) = answer_family(spec, &scene, q);
                let (cands, gt_index, rel) = candidates(spec, &mut qrng, truth, &family, &pool);
                RawRound {
                    question: noisy_question(&question_text(spec, q), noise_p, &words, &mut nrng),
                    answer: family[truth].0.clone(),
                    candidates: cands,
                    gt_index,
                    relevance: Some(rel),
                }
            })
            .collect();
        out.push(RawDialog {
            id: key,
            caption,
            rounds,
            image: Some(img),
        });
    }
    Ok(out)
}

/// Re-derives the question sequence of the dialog with id `id`
/// (noise-free text).
pub fn questions_for(spec: &SyntheticTaskSpec, id: u64) -> Vec<Question> {
    let scene = gen_scene(spec, id as usize);
    let pool = all_answers(spec);
    let mut qrng = RngStream::new(spec.seed)
        .substream(QUESTION_KEY)
        .substream(id);
    (0..spec.rounds_per_dialog)
        .map(|_| {
            let q = pick_question(&mut qrng, spec, &scene);
            let (truth, family) = answer_family(spec, &scene, q);
            let _ = candidates(spec, &mut qrng, truth, &family, &pool);
            q
        })
        .collect()
}
