//! Synthetic 2-D tabletop scenes with exact, geometric affordance oracles.
//!
//! Objects are rasterized onto a square grid of cells. Each object carries
//! the cell sets on which a primitive can succeed, and the oracle evaluates
//! the grasp / stack / open rule for a single action directly from those
//! sets. Success happens with probability `1 - noise` on rule-satisfying
//! actions and never otherwise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Number of discrete action orientations.
pub const ORIENTATION_COUNT: usize = 8;

/// Angular slack when comparing orientations.
const ANGLE_TOL: f64 = 1e-9;

const PLACEMENT_ATTEMPTS: usize = 100;

pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    GraspCube,
    GraspShapes,
    StackCube,
    OpenDrawer,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::GraspCube,
        TaskKind::GraspShapes,
        TaskKind::StackCube,
        TaskKind::OpenDrawer,
    ];

    pub fn primitive(self) -> Primitive {
        match self {
            TaskKind::GraspCube | TaskKind::GraspShapes => Primitive::Grasp,
            TaskKind::StackCube => Primitive::Stack,
            TaskKind::OpenDrawer => Primitive::Open,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::GraspCube => "grasp-cube",
            TaskKind::GraspShapes => "grasp-shapes",
            TaskKind::StackCube => "stack-cube",
            TaskKind::OpenDrawer => "open-drawer",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "task",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Grasp,
    Stack,
    Open,
}

impl Primitive {
    /// Angle of orientation index `q`. Grasp and stack orientations are
    /// axes (period pi); open orientations are pull directions (period 2 pi).
    pub fn angle(self, q: usize) -> f64 {
        match self {
            Primitive::Grasp | Primitive::Stack => q as f64 * PI / ORIENTATION_COUNT as f64,
            Primitive::Open => q as f64 * 2.0 * PI / ORIENTATION_COUNT as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectKind {
    Box,
    Pin,
    Plate,
    DrawerCabinet,
}

impl ObjectKind {
    /// Rendered height (fraction of the height range).
    pub fn height(self) -> f64 {
        match self {
            ObjectKind::Box => 0.5,
            ObjectKind::Pin => 0.3,
            ObjectKind::Plate => 0.2,
            ObjectKind::DrawerCabinet => 0.6,
        }
    }
}

/// Height of drawer handle cells.
pub const HANDLE_HEIGHT: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Action {
    pub row: usize,
    pub col: usize,
    pub orientation: usize,
}

impl Action {
    pub fn new(row: usize, col: usize, orientation: usize) -> Self {
        Self {
            row,
            col,
            orientation,
        }
    }

    /// Flat index into an `[orientation, row, col]` volume.
    pub fn flat_index(&self, height: usize, width: usize) -> usize {
        (self.orientation * height + self.row) * width + self.col
    }

    pub fn from_flat_index(index: usize, height: usize, width: usize) -> Self {
        let plane = height * width;
        Self {
            orientation: index / plane,
            row: (index % plane) / width,
            col: index % width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub success: bool,
}

impl Outcome {
    pub fn label(&self) -> f64 {
        if self.success {
            1.0
        } else {
            0.0
        }
    }
}

/// Grid geometry and object dimensions. Sizes are in cells and scale with
/// the grid; the defaults are laid out for a 64x64 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub border: usize,
    /// Rows below the border on the top edge that are outside the workspace.
    pub forbidden_rows: usize,
    pub gripper_opening: f64,
    pub noise: f64,
    /// Object kind mixture for [`TaskKind::GraspShapes`] (box, pin, plate).
    pub shape_mixture: [f64; 3],
    scale: f64,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize) -> Self {
        let scale = height.min(width) as f64 / 64.0;
        Self {
            height,
            width,
            border: 2,
            forbidden_rows: (height / 16).max(1),
            gripper_opening: 6.0 * scale,
            noise: 0.05,
            shape_mixture: [0.4, 0.4, 0.2],
            scale,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        let (h, w, b) = (self.height, self.width, self.border);
        let mut mask = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                let inside = r >= b && c >= b && r + b < h && c + b < w;
                let forbidden = r < b + self.forbidden_rows;
                mask[r * w + c] = inside && !forbidden;
            }
        }
        mask
    }

    fn box_dims(&self) -> (f64, f64) {
        (16.0 * self.scale, 5.0 * self.scale)
    }

    fn pin_dims(&self) -> (f64, f64) {
        (14.0 * self.scale, 2.0 * self.scale)
    }

    fn plate_radius(&self) -> f64 {
        5.0 * self.scale
    }

    /// Side of the square piece held during stacking.
    pub fn held_piece_side(&self) -> f64 {
        (3.0 * self.scale).max(1.0)
    }

    /// `(body along the front face, body depth, handle length)`.
    fn cabinet_dims(&self, variant: usize) -> (f64, f64, f64) {
        let (l, d, hl) = [(16.0, 10.0, 6.0), (12.0, 12.0, 4.0), (20.0, 8.0, 8.0)][variant % 3];
        (l * self.scale, d * self.scale, hl * self.scale)
    }
}

pub const CABINET_VARIANTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Continuous center `(row, col)` at a cell center.
    pub center: (f64, f64),
    /// Angle of the long axis in `[0, pi)`.
    pub long_axis_angle: f64,
    pub length: f64,
    pub width_along_short_axis: f64,
    /// Direction index of a cabinet's front-face normal.
    pub outward_normal: Option<usize>,
    pub footprint: Vec<Cell>,
    pub graspable_cells: Vec<Cell>,
    pub stack_target_cells: Vec<Cell>,
    pub handle_cells: Vec<Cell>,
}

impl SceneObject {
    /// Orientation indices closest to perpendicular to the long axis (two
    /// when the perpendicular falls exactly between discrete orientations).
    pub fn perpendicular_orientations(&self) -> Vec<usize> {
        let target = (self.long_axis_angle + PI / 2.0).rem_euclid(PI);
        let dist: Vec<f64> = (0..ORIENTATION_COUNT)
            .map(|q| axis_distance(Primitive::Grasp.angle(q), target))
            .collect();
        let best = dist.iter().cloned().fold(f64::INFINITY, f64::min);
        (0..ORIENTATION_COUNT)
            .filter(|&q| dist[q] <= best + ANGLE_TOL)
            .collect()
    }
}

/// Distance between two axes (angles modulo pi).
fn axis_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Circular distance between two direction indices.
pub fn direction_steps(a: usize, b: usize) -> usize {
    let d = (a as isize - b as isize).rem_euclid(ORIENTATION_COUNT as isize) as usize;
    d.min(ORIENTATION_COUNT - d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub task: TaskKind,
    pub objects: Vec<SceneObject>,
    owner: Vec<Option<usize>>,
    mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObservation {
    pub height: usize,
    pub width: usize,
    pub heightmap: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl SceneObservation {
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width && self.valid_mask[row * self.width + col]
    }

    pub fn valid_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.valid_mask[r * self.width + c])
            .collect()
    }
}

impl Scene {
    pub fn new(config: SceneConfig, task: TaskKind, objects: Vec<SceneObject>) -> Self {
        let mut owner = vec![None; config.height * config.width];
        for (i, obj) in objects.iter().enumerate() {
            for &(r, c) in &obj.footprint {
                owner[r * config.width + c] = Some(i);
            }
        }
        let mask = config.valid_mask();
        Self {
            config,
            task,
            objects,
            owner,
            mask,
        }
    }

    pub fn empty(config: SceneConfig, task: TaskKind) -> Self {
        Self::new(config, task, Vec::new())
    }

    pub fn object_at(&self, row: usize, col: usize) -> Option<&SceneObject> {
        if row >= self.config.height || col >= self.config.width {
            return None;
        }
        self.owner[row * self.config.width + col].map(|i| &self.objects[i])
    }

    pub fn render(&self) -> SceneObservation {
        let (h, w) = (self.config.height, self.config.width);
        let mut heightmap = vec![0.0; h * w];
        for obj in &self.objects {
            for &(r, c) in &obj.footprint {
                heightmap[r * w + c] = obj.kind.height();
            }
            for &(r, c) in &obj.handle_cells {
                heightmap[r * w + c] = HANDLE_HEIGHT;
            }
        }
        SceneObservation {
            height: h,
            width: w,
            heightmap,
            valid_mask: self.mask.clone(),
        }
    }

    /// Whether the primitive's geometric rule holds for `action`.
    pub fn rule_satisfied(&self, action: &Action, primitive: Primitive) -> bool {
        let (h, w) = (self.config.height, self.config.width);
        if action.row >= h || action.col >= w || action.orientation >= ORIENTATION_COUNT {
            return false;
        }
        if !self.mask[action.row * w + action.col] {
            return false;
        }
        let cell = (action.row, action.col);
        match primitive {
            Primitive::Grasp => self.object_at(cell.0, cell.1).is_some_and(|obj| {
                obj.width_along_short_axis <= self.config.gripper_opening
                    && obj.graspable_cells.binary_search(&cell).is_ok()
                    && obj.perpendicular_orientations().contains(&action.orientation)
            }),
            Primitive::Stack => {
                let Some(base) = self.object_at(cell.0, cell.1) else {
                    return false;
                };
                held_piece_offsets(self.config.held_piece_side(), action.orientation)
                    .iter()
                    .all(|&(dr, dc)| {
                        let r = action.row as isize + dr;
                        let c = action.col as isize + dc;
                        r >= 0
                            && c >= 0
                            && base
                                .stack_target_cells
                                .binary_search(&(r as usize, c as usize))
                                .is_ok()
                    })
            }
            Primitive::Open => self.object_at(cell.0, cell.1).is_some_and(|obj| {
                obj.handle_cells.binary_search(&cell).is_ok()
                    && obj
                        .outward_normal
                        .is_some_and(|n| direction_steps(n, action.orientation) <= 1)
            }),
        }
    }

    pub fn oracle_success_prob(&self, action: &Action, primitive: Primitive) -> f64 {
        if self.rule_satisfied(action, primitive) {
            1.0 - self.config.noise
        } else {
            0.0
        }
    }

    /// Success probabilities for every action, `[orientation, row, col]`.
    pub fn oracle_map(&self, primitive: Primitive) -> Vec<f64> {
        let (h, w) = (self.config.height, self.config.width);
        let mut out = vec![0.0; ORIENTATION_COUNT * h * w];
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.oracle_success_prob(&Action::from_flat_index(i, h, w), primitive);
        }
        out
    }

    /// Samples the outcome of executing `action`. Always draws exactly one
    /// uniform from `rng`.
    pub fn execute<R: Rng + ?Sized>(&self, action: &Action, primitive: Primitive, rng: &mut R) -> Outcome {
        let p = self.oracle_success_prob(action, primitive);
        let u: f64 = rng.gen();
        Outcome { success: u < p }
    }
}

/// Offsets of the held piece's footprint, rotated to orientation `q`.
pub fn held_piece_offsets(side: f64, q: usize) -> Vec<(isize, isize)> {
    let theta = Primitive::Stack.angle(q);
    let (s, c) = theta.sin_cos();
    let half = side / 2.0;
    let reach = side.ceil() as isize;
    let mut out = Vec::new();
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            // rotate the cell offset back into the piece frame
            let (y, x) = (dr as f64, dc as f64);
            let u = x * c + y * s;
            let v = -x * s + y * c;
            if u.abs() <= half + ANGLE_TOL && v.abs() <= half + ANGLE_TOL {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Geometric description of an object before rasterization.
struct Blueprint {
    kind: ObjectKind,
    angle: f64,
    length: f64,
    width: f64,
    outward_normal: Option<usize>,
    handle_length: f64,
    round: bool,
}

impl Blueprint {
    fn rectangle(kind: ObjectKind, angle: f64, length: f64, width: f64) -> Self {
        Self {
            kind,
            angle,
            length,
            width,
            outward_normal: None,
            handle_length: 0.0,
            round: false,
        }
    }

    fn reach(&self) -> isize {
        (self.length.max(self.width) / 2.0).ceil() as isize + 1
    }

    fn rasterize(&self, center: Cell, config: &SceneConfig) -> Option<SceneObject> {
        let (cy, cx) = (center.0 as f64 + 0.5, center.1 as f64 + 0.5);
        // long axis direction as (row, col)
        let (ay, ax) = self.angle.sin_cos();
        let reach = self.reach();
        let scale = config.scale();
        let mut footprint = Vec::new();
        let mut graspable = Vec::new();
        let mut handle = Vec::new();
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let r = center.0 as isize + dr;
                let c = center.1 as isize + dc;
                if r < 0 || c < 0 || r >= config.height as isize || c >= config.width as isize {
                    continue;
                }
                let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                let u = y * ay + x * ax; // along the long axis
                let v = -y * ax + x * ay; // along the short axis
                let inside = if self.round {
                    (u * u + v * v).sqrt() <= self.length / 2.0 + ANGLE_TOL
                } else {
                    u.abs() <= self.length / 2.0 + ANGLE_TOL && v.abs() <= self.width / 2.0 + ANGLE_TOL
                };
                if !inside {
                    continue;
                }
                let cell = (r as usize, c as usize);
                footprint.push(cell);
                match self.kind {
                    // the whole top face of a box can be pinched across its short side
                    ObjectKind::Box => graspable.push(cell),
                    ObjectKind::Pin => {
                        let outer = self.length / 2.0 - 0.5 * scale;
                        let inner = self.length / 2.0 - 4.0 * scale;
                        if u.abs() >= inner - ANGLE_TOL && u.abs() <= outer + ANGLE_TOL {
                            graspable.push(cell);
                        }
                    }
                    ObjectKind::DrawerCabinet => {
                        // for cabinets u runs along the outward normal
                        let depth = self.length / 2.0;
                        if u >= depth - 1.5 * scale.max(2.0 / 3.0) - ANGLE_TOL
                            && v.abs() <= self.handle_length / 2.0 + ANGLE_TOL
                        {
                            handle.push(cell);
                        }
                    }
                    ObjectKind::Plate => {}
                }
            }
        }
        if footprint.is_empty() {
            return None;
        }
        footprint.sort_unstable();
        graspable.sort_unstable();
        handle.sort_unstable();
        let stack_target = match self.kind {
            ObjectKind::Box | ObjectKind::Plate => footprint.clone(),
            _ => Vec::new(),
        };
        let (length, width) = if self.round {
            (self.length, self.length)
        } else if self.kind == ObjectKind::DrawerCabinet {
            (self.width, self.length)
        } else {
            (self.length, self.width)
        };
        let long_axis_angle = if self.kind == ObjectKind::DrawerCabinet {
            (self.angle + PI / 2.0).rem_euclid(PI)
        } else {
            self.angle.rem_euclid(PI)
        };
        Some(SceneObject {
            kind: self.kind,
            center: (cy, cx),
            long_axis_angle,
            length: length.max(width),
            width_along_short_axis: length.min(width),
            outward_normal: self.outward_normal,
            footprint,
            graspable_cells: graspable,
            stack_target_cells: stack_target,
            handle_cells: handle,
        })
    }
}

fn blueprint<R: Rng + ?Sized>(kind: ObjectKind, config: &SceneConfig, discrete: bool, rng: &mut R) -> Blueprint {
    let angle = if discrete {
        Primitive::Grasp.angle(rng.gen_range(0..ORIENTATION_COUNT))
    } else {
        rng.gen_range(0.0..PI)
    };
    match kind {
        ObjectKind::Box => {
            let (l, w) = config.box_dims();
            Blueprint::rectangle(kind, angle, l, w)
        }
        ObjectKind::Pin => {
            let (l, w) = config.pin_dims();
            Blueprint::rectangle(kind, angle, l, w)
        }
        ObjectKind::Plate => {
            let d = 2.0 * config.plate_radius();
            Blueprint {
                round: true,
                ..Blueprint::rectangle(kind, angle, d, d)
            }
        }
        ObjectKind::DrawerCabinet => {
            let variant = rng.gen_range(0..CABINET_VARIANTS);
            cabinet_blueprint(config, variant, rng)
        }
    }
}

fn cabinet_blueprint<R: Rng + ?Sized>(config: &SceneConfig, variant: usize, rng: &mut R) -> Blueprint {
    let (face, depth, handle) = config.cabinet_dims(variant);
    let normal = rng.gen_range(0..ORIENTATION_COUNT);
    Blueprint {
        kind: ObjectKind::DrawerCabinet,
        angle: Primitive::Open.angle(normal),
        // rasterized with `u` along the normal: length is the depth
        length: depth,
        width: face,
        outward_normal: Some(normal),
        handle_length: handle,
        round: false,
    }
}

/// Object mix of one scene before placement.
fn scene_blueprints<R: Rng + ?Sized>(task: TaskKind, config: &SceneConfig, rng: &mut R) -> Vec<Blueprint> {
    match task {
        TaskKind::GraspCube => vec![blueprint(ObjectKind::Box, config, true, rng)],
        TaskKind::GraspShapes => {
            let n = rng.gen_range(1..=3);
            (0..n)
                .map(|_| {
                    let kind = sample_shape(&config.shape_mixture, rng);
                    blueprint(kind, config, false, rng)
                })
                .collect()
        }
        TaskKind::StackCube => {
            let base = if rng.gen_bool(0.5) {
                ObjectKind::Box
            } else {
                ObjectKind::Plate
            };
            let mut v = vec![blueprint(base, config, false, rng)];
            if rng.gen_bool(0.5) {
                v.push(blueprint(ObjectKind::Pin, config, false, rng));
            }
            v
        }
        TaskKind::OpenDrawer => {
            let mut v = vec![blueprint(ObjectKind::DrawerCabinet, config, false, rng)];
            if rng.gen_bool(0.5) {
                v.push(blueprint(ObjectKind::Pin, config, false, rng));
            }
            v
        }
    }
}

fn sample_shape<R: Rng + ?Sized>(mixture: &[f64; 3], rng: &mut R) -> ObjectKind {
    let total: f64 = mixture.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (kind, &w) in [ObjectKind::Box, ObjectKind::Pin, ObjectKind::Plate]
        .into_iter()
        .zip(mixture)
    {
        if u < w {
            return kind;
        }
        u -= w;
    }
    ObjectKind::Plate
}

/// Tries to place every blueprint; `None` if some object found no spot.
fn place<R: Rng + ?Sized>(
    blueprints: &[Blueprint],
    config: &SceneConfig,
    rng: &mut R,
) -> Option<Vec<SceneObject>> {
    let mask = config.valid_mask();
    let valid: Vec<Cell> = (0..config.height)
        .flat_map(|r| (0..config.width).map(move |c| (r, c)))
        .filter(|&(r, c)| mask[r * config.width + c])
        .collect();
    if valid.is_empty() {
        return None;
    }
    let mut blocked = vec![false; config.height * config.width];
    let mut placed = Vec::with_capacity(blueprints.len());
    for bp in blueprints {
        let mut done = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let center = valid[rng.gen_range(0..valid.len())];
            let Some(obj) = bp.rasterize(center, config) else {
                continue;
            };
            let fits = obj.footprint.iter().all(|&(r, c)| {
                let i = r * config.width + c;
                mask[i] && !blocked[i]
            });
            if !fits {
                continue;
            }
            // keep a one-cell gap between objects
            for &(r, c) in &obj.footprint {
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < config.height && (cc as usize) < config.width {
                            blocked[rr as usize * config.width + cc as usize] = true;
                        }
                    }
                }
            }
            placed.push(obj);
            done = true;
            break;
        }
        if !done {
            return None;
        }
    }
    Some(placed)
}

/// Samples a scene for `task`. Placement that fails within the attempt
/// budget retries with one object fewer (never fewer than one).
pub fn generate_scene<R: Rng + ?Sized>(task: TaskKind, config: &SceneConfig, rng: &mut R) -> Scene {
    let mut blueprints = scene_blueprints(task, config, rng);
    loop {
        if let Some(objects) = place(&blueprints, config, rng) {
            return Scene::new(config.clone(), task, objects);
        }
        if blueprints.len() > 1 {
            blueprints.pop();
        }
    }
}

/// Samples a scene whose first object is of `kind` (GraspShapes evaluation)
/// or a cabinet of `variant` (OpenDrawer evaluation).
pub fn generate_variant_scene<R: Rng + ?Sized>(
    task: TaskKind,
    variant: usize,
    config: &SceneConfig,
    rng: &mut R,
) -> Scene {
    let mut blueprints = scene_blueprints(task, config, rng);
    match task {
        TaskKind::GraspShapes => {
            let kind = GRASP_SHAPE_VARIANTS[variant % GRASP_SHAPE_VARIANTS.len()];
            blueprints[0] = blueprint(kind, config, false, rng);
        }
        TaskKind::OpenDrawer => {
            blueprints[0] = cabinet_blueprint(config, variant % CABINET_VARIANTS, rng);
        }
        _ => {}
    }
    loop {
        if let Some(objects) = place(&blueprints, config, rng) {
            return Scene::new(config.clone(), task, objects);
        }
        if blueprints.len() > 1 {
            blueprints.pop();
        }
    }
}

/// Graspable shape variants used by GraspShapes evaluation.
pub const GRASP_SHAPE_VARIANTS: [ObjectKind; 2] = [ObjectKind::Box, ObjectKind::Pin];
