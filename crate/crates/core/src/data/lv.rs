use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Exp1;

use super::{csv_io, parse_err, Task, TaskMeta, TaskSource};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Rate constants `(θ1, θ2, θ3, θ4)` used in the experiments.
pub const PAPER_THETA: [f64; 4] = [0.01, 0.5, 1.0, 0.01];

const POPULATION_SCALE: f64 = 100.0;
const MIN_CONTEXT: usize = 15;
const MIN_EXTRA: usize = 15;
const MIN_SERIES: usize = 60;

/// Predator count `x`, prey count `y` at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LvState {
    pub t: f64,
    pub x: u64,
    pub y: u64,
}

/// Rates of the four events: predator birth `θ1·X·Y`, predator death
/// `θ2·X`, prey birth `θ3·Y`, predation `θ4·X·Y`.
pub fn lv_rates(theta: &[f64; 4], x: u64, y: u64) -> [f64; 4] {
    let (x, y) = (x as f64, y as f64);
    [theta[0] * x * y, theta[1] * x, theta[2] * y, theta[3] * x * y]
}

/// Exact jump-process simulation (Gillespie). Returns every visited state,
/// starting with `init`; stops after `t_max`, after `max_events` events or
/// when all rates vanish.
pub fn lv_simulate(theta: &[f64; 4], init: LvState, t_max: f64, max_events: usize, rng: &mut impl Rng) -> Vec<LvState> {
    let mut out = vec![init];
    let mut s = init;
    for _ in 0..max_events {
        let r = lv_rates(theta, s.x, s.y);
        let total: f64 = r.iter().sum();
        if total <= 0.0 {
            break;
        }
        let wait = rng.sample::<f64, _>(Exp1) / total;
        if s.t + wait > t_max {
            break;
        }
        s.t += wait;
        let mut u = rng.random::<f64>() * total;
        let mut event = 3;
        for (i, &ri) in r.iter().enumerate() {
            if u < ri {
                event = i;
                break;
            }
            u -= ri;
        }
        // Guard against round-off picking an event whose rate is zero.
        while r[event] == 0.0 {
            event -= 1;
        }
        match event {
            0 => s.x += 1,
            1 => s.x -= 1,
            2 => s.y += 1,
            _ => s.y -= 1,
        }
        out.push(s);
    }
    out
}

/// Samples a trajectory at `n_points` evenly spaced times on `[0, t_max]`,
/// holding the last state reached before each time.
pub fn record_grid(traj: &[LvState], t_max: f64, n_points: usize) -> Vec<LvState> {
    let mut out = Vec::with_capacity(n_points);
    let mut k = 0;
    for i in 0..n_points {
        let t = if n_points == 1 { 0.0 } else { t_max * i as f64 / (n_points - 1) as f64 };
        while k + 1 < traj.len() && traj[k + 1].t <= t {
            k += 1;
        }
        out.push(LvState { t, x: traj[k].x, y: traj[k].y });
    }
    out
}

/// Population series on a regular time grid, raw counts.
#[derive(Clone, Debug, PartialEq)]
pub struct LvSeries {
    pub t: Vec<f64>,
    /// Predators.
    pub x: Vec<f64>,
    /// Prey.
    pub y: Vec<f64>,
}

impl LvSeries {
    pub fn from_states(states: &[LvState]) -> Self {
        Self {
            t: states.iter().map(|s| s.t).collect(),
            x: states.iter().map(|s| s.x as f64).collect(),
            y: states.iter().map(|s| s.y as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// A task over one series: time mapped linearly onto `[−2, 2]`, populations
/// divided by 100, outputs `(predators, prey)`. Counts follow
/// `n_context ~ U{15..n/2}`, `n_extra ~ U{15..n − n_context}`.
pub fn make_lv_task(series: &LvSeries, rng: &mut impl Rng, meta: TaskMeta) -> Result<Task> {
    let n = series.len();
    if n < MIN_SERIES {
        return Err(Error::precondition("make_lv_task", format!("series has {n} points, need {MIN_SERIES}")));
    }
    let (t0, t1) = (series.t[0], series.t[n - 1]);
    if !(t1 > t0) {
        return Err(Error::precondition("make_lv_task", "series spans no time"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_context = rng.random_range(MIN_CONTEXT..=n / 2);
    let n_extra = rng.random_range(MIN_EXTRA..=n - n_context);
    let take = &idx[..n_context + n_extra];
    let xs = take.iter().map(|&i| 4.0 * (series.t[i] - t0) / (t1 - t0) - 2.0).collect();
    let ys = take
        .iter()
        .flat_map(|&i| [series.x[i] / POPULATION_SCALE, series.y[i] / POPULATION_SCALE])
        .collect();
    let m = take.len();
    Task::from_targets(Tensor::matrix(m, 1, xs)?, Tensor::matrix(m, 2, ys)?, n_context, meta)
}

/// Simulated Lotka–Volterra tasks. Initial populations are uniform on
/// `{25..75}` predators and `{75..150}` prey; runs that exhaust the event
/// budget before `t_max` are redrawn.
#[derive(Clone, Debug, PartialEq)]
pub struct LvSimSource {
    pub theta: [f64; 4],
    pub t_max: f64,
    pub n_points: usize,
    pub max_events: usize,
}

impl Default for LvSimSource {
    fn default() -> Self {
        Self { theta: PAPER_THETA, t_max: 30.0, n_points: 100, max_events: 100_000 }
    }
}

impl LvSimSource {
    pub fn series(&self, rng: &mut impl Rng) -> Result<LvSeries> {
        for _ in 0..100 {
            let init = LvState { t: 0.0, x: rng.random_range(25..=75), y: rng.random_range(75..=150) };
            let traj = lv_simulate(&self.theta, init, self.t_max, self.max_events, rng);
            let last = traj[traj.len() - 1];
            let absorbed = lv_rates(&self.theta, last.x, last.y).iter().sum::<f64>() == 0.0;
            if traj.len() <= self.max_events || absorbed {
                return Ok(LvSeries::from_states(&record_grid(&traj, self.t_max, self.n_points)));
            }
        }
        Err(Error::numeric("lv_simulate", "no trajectory finished within the event budget"))
    }
}

impl TaskSource for LvSimSource {
    fn task(&self, seed: u64) -> Result<Task> {
        let mut rng = rng_from_seed(seed);
        let series = self.series(&mut rng)?;
        make_lv_task(&series, &mut rng, TaskMeta { source: self.name(), noisy: false, seed })
    }

    fn name(&self) -> String {
        "lotka-volterra".into()
    }
}

/// Tasks cut from one observed series.
#[derive(Clone, Debug, PartialEq)]
pub struct HareLynxSource {
    pub series: LvSeries,
}

impl TaskSource for HareLynxSource {
    fn task(&self, seed: u64) -> Result<Task> {
        let mut rng = rng_from_seed(seed);
        make_lv_task(&self.series, &mut rng, TaskMeta { source: self.name(), noisy: false, seed })
    }

    fn name(&self) -> String {
        "hare-lynx".into()
    }
}

fn number(line: u64, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse { line, detail: format!("not a finite number: {field:?}") })
}

/// Reads a `year,hare,lynx` CSV. Lynx are the predators, hares the prey.
pub fn load_hare_lynx(path: &Path) -> Result<LvSeries> {
    read_hare_lynx(std::fs::File::open(path)?)
}

pub(crate) fn read_hare_lynx<R: Read>(input: R) -> Result<LvSeries> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = r.headers().map_err(|e| parse_err(1, e))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse { line: 1, detail: format!("missing column {name:?}") })
    };
    let (cy, ch, cl) = (col("year")?, col("hare")?, col("lynx")?);
    let mut s = LvSeries { t: Vec::new(), x: Vec::new(), y: Vec::new() };
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e))?;
        if rec.len() != header.len() {
            return Err(Error::Parse { line, detail: format!("expected {} fields, found {}", header.len(), rec.len()) });
        }
        let year = number(line, &rec[cy])?;
        if s.t.last().is_some_and(|&prev| year <= prev) {
            return Err(Error::Parse { line, detail: "years must increase".into() });
        }
        let (hare, lynx) = (number(line, &rec[ch])?, number(line, &rec[cl])?);
        if hare < 0.0 || lynx < 0.0 {
            return Err(Error::Parse { line, detail: "negative population".into() });
        }
        s.t.push(year);
        s.x.push(lynx);
        s.y.push(hare);
    }
    if s.is_empty() {
        return Err(Error::Parse { line: 2, detail: "no data rows".into() });
    }
    Ok(s)
}

/// Writes a series as `year,hare,lynx`.
pub fn write_hare_lynx<W: Write>(series: &LvSeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["year", "hare", "lynx"]).map_err(csv_io)?;
    for i in 0..series.len() {
        w.write_record([series.t[i].to_string(), series.y[i].to_string(), series.x[i].to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes grid states as `t,X,Y`.
pub fn write_trajectory_csv<W: Write>(states: &[LvState], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "X", "Y"]).map_err(csv_io)?;
    for s in states {
        w.write_record([s.t.to_string(), s.x.to_string(), s.y.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Vec<LvState>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| parse_err(1, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["t", "X", "Y"] {
        return Err(Error::Parse { line: 1, detail: "expected header t,X,Y".into() });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e))?;
        let count = |f: &str| f.trim().parse::<u64>().map_err(|_| Error::Parse { line, detail: format!("bad count {f:?}") });
        out.push(LvState { t: number(line, &rec[0])?, x: count(&rec[1])?, y: count(&rec[2])? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rate_examples() {
        let r = lv_rates(&PAPER_THETA, 10, 10);
        assert_eq!(r, [1.0, 5.0, 10.0, 1.0]);
        assert_eq!(r.iter().sum::<f64>(), 17.0);
    }

    #[test]
    fn empty_state_absorbs() {
        let traj = lv_simulate(&PAPER_THETA, LvState { t: 0.0, x: 0, y: 0 }, 30.0, 1000, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(traj.len(), 1);
        let grid = record_grid(&traj, 30.0, 100);
        assert_eq!(grid.len(), 100);
        assert!(grid.iter().all(|s| s.x == 0 && s.y == 0));
    }

    #[test]
    fn prey_birth_increases_prey() {
        // Without predators only prey births can fire.
        let traj = lv_simulate(&PAPER_THETA, LvState { t: 0.0, x: 0, y: 5 }, 1.0, 50, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(traj.windows(2).all(|w| w[1].y == w[0].y + 1 && w[1].x == 0));
    }

    #[test]
    fn grid_holds_last_value() {
        let traj = [
            LvState { t: 0.0, x: 1, y: 1 },
            LvState { t: 0.4, x: 2, y: 1 },
            LvState { t: 1.5, x: 2, y: 0 },
        ];
        let g = record_grid(&traj, 2.0, 5);
        let xs: Vec<u64> = g.iter().map(|s| s.x).collect();
        let ys: Vec<u64> = g.iter().map(|s| s.y).collect();
        assert_eq!(xs, [1, 2, 2, 2, 2]);
        assert_eq!(ys, [1, 1, 1, 0, 0]);
        assert_eq!(g[4].t, 2.0);
    }

    #[test]
    fn rescale_and_counts() {
        let series = LvSeries {
            t: (0..100).map(f64::from).collect(),
            x: vec![150.0; 100],
            y: vec![30.0; 100],
        };
        let meta = TaskMeta { source: "s".into(), noisy: false, seed: 0 };
        let t = make_lv_task(&series, &mut ChaCha8Rng::seed_from_u64(4), meta.clone()).unwrap();
        assert_eq!(t.y_target.row(0), &[1.5, 0.3]);
        assert!(t.n_context() >= 15 && t.n_context() <= 50);
        assert!(t.n_target() - t.n_context() >= 15);
        assert!(t.x_target.data().iter().all(|&x| (-2.0..=2.0).contains(&x)));
        let short = LvSeries { t: vec![0.0; 10], x: vec![0.0; 10], y: vec![0.0; 10] };
        assert!(matches!(
            make_lv_task(&short, &mut ChaCha8Rng::seed_from_u64(4), meta),
            Err(Error::Precondition { .. })
        ));
    }

    #[test]
    fn hare_lynx_round_trip_and_errors() {
        let s = LvSeries { t: vec![1900.0, 1901.0], x: vec![4.5, 7.0], y: vec![30.25, 1.0 / 3.0] };
        let mut buf = Vec::new();
        write_hare_lynx(&s, &mut buf).unwrap();
        assert_eq!(read_hare_lynx(buf.as_slice()).unwrap(), s);
        assert!(matches!(read_hare_lynx("year,hare\n1900,3\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        match read_hare_lynx("year,hare,lynx\n1900,3,4\n1901,x,4\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_hare_lynx("year,hare,lynx\n1900,3\n".as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let states = [LvState { t: 0.0, x: 50, y: 100 }, LvState { t: 0.3, x: 51, y: 99 }];
        let mut buf = Vec::new();
        write_trajectory_csv(&states, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("t,X,Y\n0,50,100\n"));
        assert_eq!(read_trajectory_csv(buf.as_slice()).unwrap(), states);
    }
}
