//! Occupancy bookkeeping and single-tweezer rearrangement: vacancy
//! identification, source/vacancy assignment, move scheduling and execution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::Spin;
use crate::losses::{vacuum_survival, TweezerResponse, Wavelength};
use crate::params::{check_non_negative, check_positive, SimConfig, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Optimal,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    pub speed_um_per_ms: f64,
    pub compute_overhead_ms: f64,
    pub pickup_ramp_ms: f64,
    pub release_ramp_ms: f64,
    pub policy: Policy,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            speed_um_per_ms: 75.0,
            compute_overhead_ms: 75.0,
            pickup_ramp_ms: 1.0,
            release_ramp_ms: 1.0,
            policy: Policy::Optimal,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self, prefix: &str, out: &mut Vec<Violation>) {
        check_positive(
            out,
            &format!("{prefix}speed_um_per_ms"),
            self.speed_um_per_ms,
        );
        for (name, v) in [
            ("compute_overhead_ms", self.compute_overhead_ms),
            ("pickup_ramp_ms", self.pickup_ramp_ms),
            ("release_ramp_ms", self.release_ramp_ms),
        ] {
            check_non_negative(out, &format!("{prefix}{name}"), v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub x_um: f64,
    pub y_um: f64,
    pub zone: Wavelength,
    pub occupied: bool,
    pub spin: Spin,
}

impl Site {
    fn at(x_um: f64, y_um: f64, zone: Wavelength) -> Self {
        Self {
            x_um,
            y_um,
            zone,
            occupied: false,
            spin: Spin::Up,
        }
    }

    pub fn distance_to(&self, other: &Site) -> f64 {
        (self.x_um - other.x_um).hypot(self.y_um - other.y_um)
    }
}

/// Target sites are indexed row-major, `id = row * cols + col`, at
/// `(col * a, row * a)`. The reservoir occupies columns to the left of the
/// target array (`x < 0`), filled column by column starting next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub rows: usize,
    pub cols: usize,
    pub spacing_um: f64,
    pub targets: Vec<Site>,
    pub reservoir: Vec<Site>,
}

impl OccupancyGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        spacing_um: f64,
        reservoir_sites: usize,
        reservoir_offset_um: f64,
    ) -> Self {
        let split = cols.div_ceil(2);
        let targets = (0..rows * cols)
            .map(|id| {
                let (r, c) = (id / cols, id % cols);
                let zone = if c < split {
                    Wavelength::Nm459
                } else {
                    Wavelength::Nm423
                };
                Site::at(c as f64 * spacing_um, r as f64 * spacing_um, zone)
            })
            .collect();
        let reservoir = (0..reservoir_sites)
            .map(|i| {
                let (k, r) = (i / rows, i % rows);
                Site::at(
                    -reservoir_offset_um - k as f64 * spacing_um,
                    r as f64 * spacing_um,
                    Wavelength::Nm459,
                )
            })
            .collect();
        Self {
            rows,
            cols,
            spacing_um,
            targets,
            reservoir,
        }
    }

    pub fn from_config(config: &SimConfig) -> Self {
        Self::new(
            config.target_rows as usize,
            config.target_cols as usize,
            config.target_spacing_um,
            config.reservoir_sites as usize,
            config.reservoir_offset_um,
        )
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|s| s.occupied).count()
    }

    pub fn reservoir_count(&self) -> usize {
        self.reservoir.iter().filter(|s| s.occupied).count()
    }

    pub fn fill(&self) -> f64 {
        self.target_count() as f64 / self.targets.len() as f64
    }

    pub fn target_occupancy(&self) -> Vec<bool> {
        self.targets.iter().map(|s| s.occupied).collect()
    }

    pub fn reservoir_occupancy(&self) -> Vec<bool> {
        self.reservoir.iter().map(|s| s.occupied).collect()
    }

    pub fn set_all_targets(&mut self, occupied: bool) {
        for s in &mut self.targets {
            s.occupied = occupied;
            s.spin = Spin::Up;
        }
    }

    /// Distance from a target site to the nearest reservoir site.
    pub fn distance_from_reservoir(&self, target: usize) -> f64 {
        let t = &self.targets[target];
        self.reservoir
            .iter()
            .map(|r| r.distance_to(t))
            .fold(f64::INFINITY, f64::min)
    }

    /// Waypoints of the move from a reservoir site to a target site: a half step
    /// into the row channel, along it to the column channel left of the
    /// destination, along that channel to the destination row, and a half step in.
    pub fn path(&self, source: usize, destination: usize) -> Vec<(f64, f64)> {
        let s = &self.reservoir[source];
        let d = &self.targets[destination];
        let h = 0.5 * self.spacing_um;
        let yc = if d.y_um >= s.y_um {
            s.y_um + h
        } else {
            s.y_um - h
        };
        vec![
            (s.x_um, s.y_um),
            (s.x_um, yc),
            (d.x_um - h, yc),
            (d.x_um - h, d.y_um),
            (d.x_um, d.y_um),
        ]
    }

    /// Target sites other than the destination whose distance to the path is at most `radius`.
    pub fn sites_near_path(
        &self,
        path: &[(f64, f64)],
        destination: usize,
        radius: f64,
    ) -> Vec<usize> {
        let (xmin, xmax, ymin, ymax) = path.iter().fold(
            (
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
            ),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        self.targets
            .iter()
            .enumerate()
            .filter(|&(id, t)| {
                id != destination
                    && t.x_um >= xmin - radius
                    && t.x_um <= xmax + radius
                    && t.y_um >= ymin - radius
                    && t.y_um <= ymax + radius
                    && path
                        .windows(2)
                        .any(|w| point_segment_distance((t.x_um, t.y_um), w[0], w[1]) <= radius)
            })
            .map(|(id, _)| id)
            .collect()
    }
}

pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

pub fn path_length(path: &[(f64, f64)]) -> f64 {
    path.windows(2)
        .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
        .sum()
}

/// Vacant target sites and occupied reservoir sites according to the image,
/// which may disagree with the true occupancy.
pub fn identify_vacancies(
    target_classified: &[bool],
    reservoir_classified: &[bool],
) -> (Vec<usize>, Vec<usize>) {
    let vacancies = (0..target_classified.len())
        .filter(|&i| !target_classified[i])
        .collect();
    let sources = (0..reservoir_classified.len())
        .filter(|&i| reservoir_classified[i])
        .collect();
    (vacancies, sources)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Move {
    pub source: usize,
    pub destination: usize,
    pub path_length_um: f64,
    /// Sites believed occupied that the path passes within the proximity radius of.
    pub close_passes: u32,
    pub duration_ms: f64,
    #[serde(skip)]
    pub nearby: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MovePlan {
    pub moves: Vec<Move>,
    pub total_duration_ms: f64,
    pub compute_overhead_ms: f64,
    /// Sum over moves of the straight source–destination distance.
    pub total_distance_um: f64,
}

impl MovePlan {
    pub fn path_time_ms(&self, speed_um_per_ms: f64) -> f64 {
        self.moves
            .iter()
            .map(|m| m.path_length_um / speed_um_per_ms)
            .sum()
    }

    pub fn to_jsonl(&self) -> String {
        self.moves
            .iter()
            .map(|m| {
                serde_json::json!({
                    "source": m.source,
                    "destination": m.destination,
                    "path_length_um": m.path_length_um,
                    "duration_ms": m.duration_ms,
                    "close_passes": m.close_passes,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`),
/// Hungarian method with potentials, O(rows² · cols).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Pairs sources with vacancies. Moves are ordered farthest destination (from
/// the reservoir) first; durations are left at zero until [`schedule`].
pub fn plan_moves(
    grid: &OccupancyGrid,
    sources: &[usize],
    vacancies: &[usize],
    target_believed: &[bool],
    policy: Policy,
    proximity_radius_um: f64,
) -> MovePlan {
    let mut sources = sources.to_vec();
    let mut vacancies = vacancies.to_vec();
    sources.sort_unstable();
    sources.dedup();
    vacancies.sort_unstable();
    vacancies.dedup();
    let dist = |s: usize, v: usize| grid.reservoir[s].distance_to(&grid.targets[v]);

    let mut pairs: Vec<(usize, usize)> = match policy {
        Policy::Optimal => {
            if sources.len() <= vacancies.len() {
                let cost: Vec<Vec<f64>> = sources
                    .iter()
                    .map(|&s| vacancies.iter().map(|&v| dist(s, v)).collect())
                    .collect();
                hungarian(&cost)
                    .into_iter()
                    .enumerate()
                    .map(|(i, j)| (sources[i], vacancies[j]))
                    .collect()
            } else {
                let cost: Vec<Vec<f64>> = vacancies
                    .iter()
                    .map(|&v| sources.iter().map(|&s| dist(s, v)).collect())
                    .collect();
                hungarian(&cost)
                    .into_iter()
                    .enumerate()
                    .map(|(i, j)| (sources[j], vacancies[i]))
                    .collect()
            }
        }
        Policy::Greedy => {
            let mut order: Vec<(f64, usize)> = vacancies
                .iter()
                .map(|&v| (grid.distance_from_reservoir(v), v))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut used = vec![false; sources.len()];
            let mut out = Vec::new();
            for &(_, v) in order.iter().take(sources.len()) {
                let best = (0..sources.len()).filter(|&i| !used[i]).min_by(|&a, &b| {
                    dist(sources[a], v)
                        .total_cmp(&dist(sources[b], v))
                        .then(sources[a].cmp(&sources[b]))
                });
                if let Some(i) = best {
                    used[i] = true;
                    out.push((sources[i], v));
                }
            }
            out
        }
    };

    pairs.sort_by_key(|&(s, _)| s);
    let total_distance_um = pairs.iter().map(|&(s, v)| dist(s, v)).sum();

    let reservoir_distance: Vec<(usize, f64)> = pairs
        .iter()
        .map(|&(_, v)| (v, grid.distance_from_reservoir(v)))
        .collect();
    let rd = |v: usize| {
        reservoir_distance
            .iter()
            .find(|&&(x, _)| x == v)
            .map(|&(_, d)| d)
            .unwrap_or(0.0)
    };
    pairs.sort_by(|a, b| rd(b.1).total_cmp(&rd(a.1)).then(a.1.cmp(&b.1)));

    let moves = pairs
        .into_iter()
        .map(|(source, destination)| {
            let path = grid.path(source, destination);
            let nearby = grid.sites_near_path(&path, destination, proximity_radius_um);
            let close_passes = nearby.iter().filter(|&&i| target_believed[i]).count() as u32;
            Move {
                source,
                destination,
                path_length_um: path_length(&path),
                close_passes,
                duration_ms: 0.0,
                nearby,
            }
        })
        .collect();
    MovePlan {
        moves,
        total_duration_ms: 0.0,
        compute_overhead_ms: 0.0,
        total_distance_um,
    }
}

pub fn schedule(mut plan: MovePlan, params: &PlannerParams) -> MovePlan {
    for m in &mut plan.moves {
        m.duration_ms = params.pickup_ramp_ms
            + m.path_length_um / params.speed_um_per_ms
            + params.release_ramp_ms;
    }
    plan.compute_overhead_ms = params.compute_overhead_ms;
    plan.total_duration_ms =
        params.compute_overhead_ms + plan.moves.iter().map(|m| m.duration_ms).sum::<f64>();
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionLedger {
    /// Atoms placed into target sites.
    pub transfers: u32,
    pub disturbance: u32,
    /// Atoms lost to placing onto an already occupied site (both atoms count).
    pub collision: u32,
    pub vacuum: u32,
    pub pickup_failures: u32,
    /// Moves whose source was believed occupied but was actually empty.
    pub empty_sources: u32,
}

/// Carries out the plan on the true occupancy. Vacuum loss over the plan's
/// full duration is applied to every target atom at the end.
pub fn execute_plan<R: Rng + ?Sized>(
    plan: &MovePlan,
    grid: &mut OccupancyGrid,
    response: TweezerResponse,
    vacuum_lifetime_ms: f64,
    rng: &mut R,
) -> ExecutionLedger {
    let mut ledger = ExecutionLedger::default();
    for m in &plan.moves {
        let carried = if grid.reservoir[m.source].occupied {
            grid.reservoir[m.source].occupied = false;
            if rng.random::<f64>() < response.pickup_success {
                Some(grid.reservoir[m.source].spin)
            } else {
                ledger.pickup_failures += 1;
                None
            }
        } else {
            ledger.empty_sources += 1;
            None
        };
        if response.disturbance_per_pass > 0.0 {
            for &i in &m.nearby {
                if grid.targets[i].occupied && rng.random::<f64>() < response.disturbance_per_pass {
                    grid.targets[i].occupied = false;
                    ledger.disturbance += 1;
                }
            }
        }
        if let Some(spin) = carried {
            ledger.transfers += 1;
            let dest = &mut grid.targets[m.destination];
            if dest.occupied {
                dest.occupied = false;
                ledger.collision += 2;
            } else {
                dest.occupied = true;
                dest.spin = spin;
            }
        }
    }
    let survival = vacuum_survival(plan.total_duration_ms, vacuum_lifetime_ms);
    if survival < 1.0 {
        for s in grid.targets.iter_mut().filter(|s| s.occupied) {
            if rng.random::<f64>() >= survival {
                s.occupied = false;
                ledger.vacuum += 1;
            }
        }
        for s in grid.reservoir.iter_mut().filter(|s| s.occupied) {
            if rng.random::<f64>() >= survival {
                s.occupied = false;
            }
        }
    }
    ledger
}
