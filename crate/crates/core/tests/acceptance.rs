//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line; the
//! test fails at the end if any criterion failed.
//!
//! Run with `cargo test -p vchatter-core --test acceptance -- --nocapture`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use vchatter_core::agents::plan::{
    parse_plan_card, parse_plan_card_with, render_plan_card, ExposurePlanCard, ParseOptions, PlanCardError, PlanRole,
};
use vchatter_core::agents::Gender;
use vchatter_core::instruments::{
    InstrumentCatalog, LsasBand, LsasItem, LsasResponse, SasAResponse, ScaleResponses, ScaleScore, SocialAttitude,
    UclaResponse,
};
use vchatter_core::protocol::{advance, agent_h_count, level_for_day, ExposureLevel, Phase, SessionEvent, SessionState, TaskOutcome, DAYS};
use vchatter_core::service::outcome_report;
use vchatter_core::sim::{self, SimulationScript};
use vchatter_core::stats::{wilcoxon_signed_rank, wilcoxon_signed_rank_with, Measure, PairedSample, WilcoxonOptions};
use vchatter_core::store::{ScaleRecord, ScaleTiming, SessionMeta, Store};

struct Verdict {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(name: &'static str, passed: bool, detail: impl Into<String>) -> Verdict {
    let v = Verdict { name, passed, detail: detail.into() };
    println!("{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
    v
}

// ---------------------------------------------------------------------------
// Scale scoring

fn lsas_band_oracle(total: u32) -> LsasBand {
    match total {
        t if t >= 60 => LsasBand::ClinicalSad,
        t if t >= 30 => LsasBand::PotentialSad,
        _ => LsasBand::Subclinical,
    }
}

fn scale_machinery() -> Verdict {
    let started = Instant::now();
    let catalog = InstrumentCatalog::default();
    let reverse = catalog.ucla_reverse_set();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut problems = Vec::new();
    let (mut lo, mut hi) = (u32::MAX, 0);
    const N: usize = 10_000;

    for _ in 0..N {
        let items: Vec<LsasItem> =
            (0..24).map(|_| LsasItem { fear: rng.random_range(0..=3), avoidance: rng.random_range(0..=3) }).collect();
        let expected: u32 = items.iter().map(|i| u32::from(i.fear) + u32::from(i.avoidance)).sum();
        match catalog.score(&ScaleResponses::Lsas(LsasResponse { items })) {
            Ok(ScaleScore::Lsas(s)) => {
                lo = lo.min(s.total);
                hi = hi.max(s.total);
                if s.total != expected || s.fear_sum + s.avoidance_sum != s.total || s.band != lsas_band_oracle(expected) {
                    problems.push(format!("lsas {s:?} vs {expected}"));
                }
            }
            other => problems.push(format!("lsas scored as {other:?}")),
        }

        let sas: Vec<u8> = (0..18).map(|_| rng.random_range(1..=5)).collect();
        let expected: u32 = sas.iter().map(|&v| u32::from(v)).sum();
        if catalog.score(&ScaleResponses::SasA(SasAResponse { items: sas })) != Ok(ScaleScore::SasA { total: expected }) {
            problems.push("sas_a total".into());
        }

        let ucla: Vec<u8> = (0..20).map(|_| rng.random_range(1..=4)).collect();
        let expected: u32 =
            ucla.iter().enumerate().map(|(i, &v)| u32::from(if reverse.contains(&i) { 5 - v } else { v })).sum();
        let r = ScaleResponses::Ucla(UclaResponse { items: ucla, reverse_set: BTreeSet::new() });
        if catalog.score(&r) != Ok(ScaleScore::Ucla { total: expected }) {
            problems.push("ucla total".into());
        }

        let sa = SocialAttitude {
            contravene: rng.random_range(1..=7),
            fear: rng.random_range(1..=7),
            isolation: rng.random_range(1..=7),
        };
        if catalog.score(&ScaleResponses::SocialAttitude(sa)) != Ok(ScaleScore::SocialAttitude(sa)) {
            problems.push("social attitude".into());
        }
    }

    let extremes = [(0u8, 0u32), (3, 144)];
    for (v, total) in extremes {
        match catalog.score(&ScaleResponses::Lsas(LsasResponse::uniform(v, v))) {
            Ok(ScaleScore::Lsas(s)) if s.total == total => {}
            other => problems.push(format!("uniform({v},{v}) gave {other:?}")),
        }
    }
    for (total, band) in [(29, LsasBand::Subclinical), (30, LsasBand::PotentialSad), (59, LsasBand::PotentialSad), (60, LsasBand::ClinicalSad)] {
        if catalog.lsas_thresholds().band(total) != band {
            problems.push(format!("band at {total}"));
        }
    }
    let th = catalog.lsas_thresholds();
    if (th.potential, th.clinical) != (30, 60) {
        problems.push(format!("thresholds {th:?}"));
    }
    let out_of_range = [
        ScaleResponses::Lsas(LsasResponse::uniform(4, 0)),
        ScaleResponses::SasA(SasAResponse { items: vec![0; 18] }),
        ScaleResponses::Ucla(UclaResponse { items: vec![5; 20], reverse_set: BTreeSet::new() }),
        ScaleResponses::SocialAttitude(SocialAttitude { contravene: 8, fear: 1, isolation: 1 }),
        ScaleResponses::SasA(SasAResponse { items: vec![3; 17] }),
    ];
    for r in &out_of_range {
        if catalog.score(r).is_ok() {
            problems.push(format!("accepted invalid {r:?}"));
        }
    }

    let elapsed = started.elapsed();
    let limit = Duration::from_secs(5);
    verdict(
        "scale machinery",
        problems.is_empty() && elapsed < limit && lo <= hi && hi <= 144,
        format!(
            "{N} responses per instrument, LSAS totals seen {lo}..={hi}, thresholds {}/{}, {} mismatch(es), {:.2?} (limit {limit:?}){}",
            th.potential,
            th.clinical,
            problems.len(),
            elapsed,
            problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank

/// Exact two-sided p by enumerating every sign assignment. Ranks are doubled
/// mid-ranks so ties stay integral.
fn brute_force_p(pre: &[f64], post: &[f64]) -> f64 {
    let d: Vec<f64> = pre.iter().zip(post).map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
    let n = d.len();
    let ranks: Vec<i64> = d
        .iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count() as i64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as i64;
            2 * less + equal + 1
        })
        .collect();
    let total: i64 = ranks.iter().sum();
    let observed: i64 = ranks.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
    let dev = (2 * observed - total).abs();
    let hits = (0u32..1 << n)
        .filter(|mask| {
            let s: i64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            (2 * s - total).abs() >= dev
        })
        .count();
    hits as f64 / f64::from(1u32 << n)
}

struct Draw {
    pre: Vec<f64>,
    post: Vec<f64>,
    n_eff: usize,
}

fn wilcoxon_draws() -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..500)
        .map(|_| {
            let n_eff = rng.random_range(3..=12);
            let zeros = rng.random_range(0..=3);
            let mut pre = Vec::new();
            let mut post = Vec::new();
            for i in 0..n_eff + zeros {
                let base = f64::from(rng.random_range(0..=20));
                let diff = if i < n_eff {
                    let m = f64::from(rng.random_range(1..=6));
                    if rng.random_bool(0.5) { m } else { -m }
                } else {
                    0.0
                };
                pre.push(base);
                post.push(base + diff);
            }
            Draw { pre, post, n_eff }
        })
        .collect()
}

fn wilcoxon_exact(draws: &[Draw]) -> Verdict {
    let started = Instant::now();
    let mut worst = 0f64;
    let mut problems = Vec::new();
    for d in draws {
        let s = PairedSample::new(d.pre.clone(), d.post.clone()).unwrap();
        let r = wilcoxon_signed_rank(&s).unwrap();
        let oracle = brute_force_p(&d.pre, &d.post);
        worst = worst.max((r.p_two_sided - oracle).abs());
        if r.n_effective != d.n_eff || (r.p_two_sided - oracle).abs() > 1e-12 {
            problems.push(format!("n_eff {} p {} vs {oracle}", r.n_effective, r.p_two_sided));
        }
    }
    let elapsed = started.elapsed();
    let limit = Duration::from_secs(30);
    verdict(
        "wilcoxon exact p",
        problems.is_empty() && elapsed < limit,
        format!(
            "{} samples with n_eff 3..=12 against brute-force enumeration, max |diff| {worst:.1e}, {} mismatch(es), {elapsed:.2?} (limit {limit:?})",
            draws.len(),
            problems.len()
        ),
    )
}

fn wilcoxon_normal(draws: &[Draw]) -> Verdict {
    let mut worst = (0f64, 0usize);
    let mut worst_cc = 0f64;
    let mut count = 0;
    for d in draws.iter().filter(|d| (8..=12).contains(&d.n_eff)) {
        count += 1;
        let s = PairedSample::new(d.pre.clone(), d.post.clone()).unwrap();
        let exact = wilcoxon_signed_rank(&s).unwrap().p_two_sided;
        let normal = wilcoxon_signed_rank_with(&s, &WilcoxonOptions::normal_only()).unwrap().p_two_sided;
        let cc = WilcoxonOptions { continuity_correction: true, ..WilcoxonOptions::normal_only() };
        let corrected = wilcoxon_signed_rank_with(&s, &cc).unwrap().p_two_sided;
        if (normal - exact).abs() > worst.0 {
            worst = ((normal - exact).abs(), d.n_eff);
        }
        worst_cc = worst_cc.max((corrected - exact).abs());
    }
    verdict(
        "wilcoxon normal approximation within 0.02 for n_eff 8..=12",
        worst.0 <= 0.02,
        format!(
            "{count} samples, max |p_normal - p_exact| = {:.4} at n_eff {} (with continuity correction {worst_cc:.4})",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// Outcome table

struct Row {
    measure: Measure,
    pre: [u32; 10],
    post: [u32; 10],
    // mean, sd before; mean, sd after; z; p
    published: [f64; 6],
}

const TABLE: [Row; 5] = [
    Row {
        measure: Measure::SasA,
        pre: [45, 46, 47, 49, 56, 59, 67, 68, 70, 72],
        post: [38, 45, 44, 46, 49, 57, 65, 67, 62, 49],
        published: [57.90, 10.75, 52.20, 9.90, -2.810, 0.005],
    },
    Row {
        measure: Measure::Ucla,
        pre: [30, 54, 31, 41, 33, 51, 63, 64, 63, 51],
        post: [30, 51, 29, 38, 30, 48, 63, 60, 58, 51],
        published: [48.10, 13.53, 45.80, 13.11, -2.410, 0.016],
    },
    Row {
        measure: Measure::Contravene,
        pre: [4, 5, 6, 6, 6, 6, 6, 6, 6, 6],
        post: [4, 3, 5, 4, 5, 5, 4, 5, 4, 5],
        published: [5.70, 0.67, 4.40, 0.70, -2.739, 0.006],
    },
    Row {
        measure: Measure::Fear,
        pre: [3, 4, 4, 5, 5, 5, 5, 7, 7, 7],
        post: [3, 3, 3, 3, 6, 5, 5, 3, 5, 5],
        published: [5.20, 1.40, 4.10, 1.20, -2.058, 0.040],
    },
    Row {
        measure: Measure::Isolation,
        pre: [2, 3, 3, 3, 3, 5, 6, 6, 6, 7],
        post: [1, 2, 2, 2, 3, 4, 4, 6, 1, 3],
        published: [4.40, 1.78, 2.80, 1.55, -2.585, 0.010],
    },
];

/// Item responses whose scored sum is `total`: every item starts at its
/// minimum scored value and is raised in index order.
fn items_for(total: u32, count: usize, min: u8, max: u8, reverse: &BTreeSet<usize>) -> Vec<u8> {
    let mut scored = vec![min; count];
    let mut left = total - u32::from(min) * count as u32;
    for v in &mut scored {
        let add = left.min(u32::from(max - min));
        *v += add as u8;
        left -= add;
    }
    assert_eq!(left, 0, "total {total} out of range");
    scored.iter().enumerate().map(|(i, &v)| if reverse.contains(&i) { min + max - v } else { v }).collect()
}

fn table_two() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let catalog = InstrumentCatalog::default();
    let reverse = catalog.ucla_reverse_set();
    let at = Utc.with_ymd_and_hms(2025, 1, 6, 9, 0, 0).unwrap();
    let col = |m: Measure, i: usize, timing: ScaleTiming| {
        let row = TABLE.iter().find(|r| r.measure == m).unwrap();
        if timing == ScaleTiming::Pre { row.pre[i] } else { row.post[i] }
    };
    for i in 0..10 {
        let id = format!("p{:02}", i + 1);
        store
            .create_session(&SessionMeta { session_id: id.clone(), pseudonym: format!("P{:02}", i + 1), opt_in: true, created_at: at })
            .unwrap();
        for timing in [ScaleTiming::Pre, ScaleTiming::Post] {
            let responses = [
                ScaleResponses::SasA(SasAResponse { items: items_for(col(Measure::SasA, i, timing), 18, 1, 5, &BTreeSet::new()) }),
                ScaleResponses::Ucla(UclaResponse {
                    items: items_for(col(Measure::Ucla, i, timing), 20, 1, 4, &reverse),
                    reverse_set: BTreeSet::new(),
                }),
                ScaleResponses::SocialAttitude(SocialAttitude {
                    contravene: col(Measure::Contravene, i, timing) as u8,
                    fear: col(Measure::Fear, i, timing) as u8,
                    isolation: col(Measure::Isolation, i, timing) as u8,
                }),
            ];
            for r in responses {
                let score = catalog.score(&r).unwrap();
                store.append_scale(&id, &ScaleRecord { instrument: r.instrument(), timing, responses: r, score, at }).unwrap();
            }
        }
    }
    let report = outcome_report(&store).unwrap();

    let mut off = Vec::new();
    let mut diag = Vec::new();
    for row in &TABLE {
        let r = report.row(row.measure).unwrap();
        let got = [r.pre_mean, r.pre_sd, r.post_mean, r.post_sd];
        for (g, want) in got.iter().zip(&row.published[..4]) {
            if format!("{g:.2}") != format!("{want:.2}") {
                off.push(format!("{} {g:.2} vs {want:.2}", row.measure));
            }
        }
        if r.z >= 0.0 {
            off.push(format!("{} z {:.3} not negative", row.measure, r.z));
        }
        let s = PairedSample::new(row.pre.map(f64::from).to_vec(), row.post.map(f64::from).to_vec()).unwrap();
        let normal = wilcoxon_signed_rank_with(&s, &WilcoxonOptions::normal_only()).unwrap().p_two_sided;
        diag.push(format!(
            "{} z {:.3} (table {:.3}) p {:.3}/{} normal p {:.3} (table {:.3})",
            row.measure, r.z, row.published[4], r.p, r.significance_marks, normal, row.published[5]
        ));
    }
    verdict(
        "outcome table reproduction",
        off.is_empty() && report.n == 10,
        format!("N = {}; {}{}", report.n, diag.join("; "), if off.is_empty() { String::new() } else { format!("; off: {}", off.join(", ")) }),
    )
}

// ---------------------------------------------------------------------------
// Protocol schedule

type Key = (u8, Phase, Option<(ExposureLevel, usize)>);

fn card(level: ExposureLevel, roles: usize) -> ExposurePlanCard {
    ExposurePlanCard {
        level,
        roles: (0..roles)
            .map(|i| PlanRole { name: format!("R{i}"), gender: Some(Gender::Male), profile_text: format!("role {i}") })
            .collect(),
        scenario_text: "somewhere".into(),
        task_text: "something".into(),
        hints: vec![],
    }
}

fn all_events() -> Vec<SessionEvent> {
    let mut v = vec![
        SessionEvent::AssessmentDone,
        SessionEvent::ScenarioInstantiated,
        SessionEvent::TaskCompleted { outcome: TaskOutcome::Success },
        SessionEvent::TaskCompleted { outcome: TaskOutcome::Failed },
        SessionEvent::DebriefDone,
        SessionEvent::DayClosed,
    ];
    v.extend((0..=2).map(|slot| SessionEvent::HelpRequested { slot }));
    for level in [ExposureLevel::Low, ExposureLevel::Medium, ExposureLevel::High] {
        for roles in 1..=2 {
            v.push(SessionEvent::PlanConfirmed { plan: card(level, roles) });
        }
    }
    v
}

fn key(s: &SessionState) -> Key {
    (s.day, s.phase, s.active_plan.as_ref().map(|p| (p.level, p.roles.len())))
}

/// Every sequence of confirmed (level, role count) pairs along which the
/// session can reach `Closed` from `s`.
fn closing_sequences(
    s: &SessionState,
    events: &[SessionEvent],
    memo: &mut HashMap<Key, BTreeSet<Vec<(ExposureLevel, usize)>>>,
    on_path: &mut BTreeSet<Key>,
) -> BTreeSet<Vec<(ExposureLevel, usize)>> {
    let k = key(s);
    if s.phase == Phase::Closed {
        return BTreeSet::from([vec![]]);
    }
    if let Some(found) = memo.get(&k) {
        return found.clone();
    }
    if !on_path.insert(k) {
        // a cycle adds no new closing sequence
        return BTreeSet::new();
    }
    let mut out = BTreeSet::new();
    for e in events {
        let Ok(next) = advance(s, e) else { continue };
        let prefix = match e {
            SessionEvent::PlanConfirmed { plan } => Some((plan.level, plan.roles.len())),
            _ => None,
        };
        for tail in closing_sequences(&next, events, memo, on_path) {
            out.insert(prefix.into_iter().chain(tail).collect());
        }
    }
    on_path.remove(&k);
    memo.insert(k, out.clone());
    out
}

fn protocol_schedule() -> Verdict {
    let events = all_events();
    let start = SessionState::new("x", "x", Utc.with_ymd_and_hms(2025, 1, 6, 9, 0, 0).unwrap());
    let found = closing_sequences(&start, &events, &mut HashMap::new(), &mut BTreeSet::new());
    use ExposureLevel::*;
    let expected = vec![(Low, 1), (Low, 1), (Medium, 1), (Medium, 1), (High, 2), (High, 2)];
    let table: Vec<(ExposureLevel, usize)> =
        (1..=DAYS).map(|d| level_for_day(d).unwrap()).map(|l| (l, agent_h_count(l))).collect();
    let counts: Vec<usize> = table.iter().map(|(_, n)| *n).collect();
    verdict(
        "protocol level schedule",
        found.len() == 1 && found.first() == Some(&expected) && table == expected,
        format!(
            "{} closing sequence(s) over {} event kinds; levels {:?}; Agent-H counts {counts:?}",
            found.len(),
            events.len(),
            found.first().map(|s| s.iter().map(|(l, _)| *l).collect::<Vec<_>>()).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// Simulation

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn e2e_determinism(a: &Path, b: &Path) -> Verdict {
    let started = Instant::now();
    let script = SimulationScript::canonical();
    let first = sim::run_simulation(&script, a).unwrap();
    let second = sim::run_simulation(&script, b).unwrap();
    let elapsed = started.elapsed();
    let (fa, fb) = (files_under(a), files_under(b));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same = fa.len() == fb.len() && differing.is_empty();
    let limit = Duration::from_secs(10);
    verdict(
        "end-to-end simulation determinism",
        first.report.ok && second.report.ok && first.report.exit_code() == 0 && same && elapsed < limit,
        format!(
            "two runs ok={}/{}, {} file(s) compared, {} differing{}, {elapsed:.2?} for both (limit {limit:?})",
            first.report.ok,
            second.report.ok,
            fa.len(),
            differing.len() + fa.len().abs_diff(fb.len()),
            first.report.first_violation.as_ref().map(|v| format!("; violation: {v}")).unwrap_or_default()
        ),
    )
}

const WINDOW: usize = 20;

fn char_windows(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < WINDOW {
        return vec![];
    }
    (0..=chars.len() - WINDOW).map(|i| chars[i..i + WINDOW].iter().collect()).collect()
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Windows of Agent-H text that show up in a therapist prompt bundle and
/// are not explained by something the participant typed.
fn therapist_leaks(bundles: &[String], agent_h: &[String], participant: &[String]) -> Vec<String> {
    let mut leaks = BTreeSet::new();
    for turn in agent_h {
        for w in char_windows(turn) {
            if participant.iter().any(|p| p.contains(&w)) {
                continue;
            }
            if bundles.iter().any(|b| b.contains(&w)) {
                leaks.insert(w);
            }
        }
    }
    leaks.into_iter().collect()
}

fn memory_isolation(run: &Path) -> Verdict {
    let mut agent_h = Vec::new();
    let mut participant = Vec::new();
    let sessions = run.join("data").join("sessions");
    for session in std::fs::read_dir(&sessions).unwrap() {
        for file in std::fs::read_dir(session.unwrap().path().join("transcripts")).unwrap() {
            let path = file.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let scenario = name.starts_with("day") && name.ends_with(".jsonl");
            if !(scenario || name == "therapist.jsonl") {
                continue;
            }
            for entry in read_jsonl(&path) {
                let text = entry["text"].as_str().unwrap().to_string();
                match entry["author"]["type"].as_str() {
                    Some("participant") => participant.push(text),
                    Some("agent") if scenario => agent_h.push(text),
                    _ => {}
                }
            }
        }
    }
    let bundles: Vec<String> = read_jsonl(&run.join("prompts.jsonl"))
        .iter()
        .filter(|r| r["channel"]["type"] == "therapist")
        .map(|r| {
            let mut parts = vec![r["bundle"]["system_text"].as_str().unwrap().to_string()];
            parts.extend(r["bundle"]["context"].as_array().unwrap().iter().map(|m| m["content"].as_str().unwrap().to_string()));
            parts.join("\n")
        })
        .collect();
    let leaks = therapist_leaks(&bundles, &agent_h, &participant);

    // negative control: a bundle quoting one interlocutor turn must be caught
    let quoted = agent_h.iter().find(|t| t.chars().count() >= WINDOW && !participant.iter().any(|p| p.contains(t.as_str())));
    let control = quoted.map(|q| {
        let mut tampered = bundles.clone();
        tampered.push(format!("Earlier the classmate said: {q}"));
        !therapist_leaks(&tampered, &agent_h, &participant).is_empty()
    });

    verdict(
        "therapist memory isolation",
        leaks.is_empty() && !bundles.is_empty() && !agent_h.is_empty() && control == Some(true),
        format!(
            "{} therapist bundle(s) against {} Agent-H turn(s) with {WINDOW}-char windows, {} leak(s), injected leak detected: {}{}",
            bundles.len(),
            agent_h.len(),
            leaks.len(),
            control.map_or("no candidate".to_string(), |c| c.to_string()),
            leaks.first().map(|l| format!("; first: {l:?}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// Plan-card grammar

const HUI: &str = include_str!("fixtures/hui_card.txt");

fn hui_with(from: &str, to: &str) -> String {
    assert!(HUI.contains(from), "{from}");
    HUI.replacen(from, to, 1)
}

fn malformed() -> Vec<(&'static str, String, ExposureLevel, ParseOptions, PlanCardError)> {
    use ExposureLevel::*;
    use PlanCardError::*;
    let lenient = ParseOptions::default();
    let strict = ParseOptions { strict: true };
    let missing = |s: &str| MissingSection(s.into());
    let empty = |s: &str| EmptySection(s.into());
    let dup = |s: &str| DuplicateSection(s.into());
    let two = "Interaction Role:\nCharacter-1:\nYou are Chen, a classmate.\nCharacter-2:\nYou are Yu, another classmate.\n\n\
               Exposure Scenario:\nA group chat after class.\n\nYour Task:\nJoin the conversation.\n";
    let three = "Interaction Role:\nCharacter-1:\nYou are Chen.\nCharacter-2:\nYou are Yu.\nCharacter-3:\nYou are Bo.\n\n\
                 Exposure Scenario:\nA group chat after class.\n\nYour Task:\nJoin the conversation.\n";
    vec![
        ("empty text", String::new(), Medium, lenient, EmptyInput),
        ("whitespace only", " \n\t\n ".into(), Medium, lenient, EmptyInput),
        ("no role section", hui_with("Interaction Role:", "Background:"), Medium, lenient, missing("Interaction Role")),
        ("no scenario section", hui_with("Exposure Scenario:", "Setting:"), Medium, lenient, missing("Exposure Scenario")),
        ("no task section", hui_with("Your Task:\nYou must return the homework to the other person’s hands.", ""), Medium, lenient, missing("Your Task")),
        ("task header renamed", hui_with("Your Task:", "Task:"), Medium, lenient, missing("Your Task")),
        ("empty role body", "Interaction Role:\n\nExposure Scenario:\nA shop.\n\nYour Task:\nBuy a pen.\n".into(), Low, lenient, empty("Interaction Role")),
        ("empty scenario body", "Interaction Role:\nYou are Tao, a cashier.\n\nExposure Scenario:\n   \nYour Task:\nBuy a pen.\n".into(), Low, lenient, empty("Exposure Scenario")),
        ("empty task body", hui_with("You must return the homework to the other person’s hands.", ""), Medium, lenient, empty("Your Task")),
        ("task twice", format!("{HUI}\nYour Task:\nAgain.\n"), Medium, lenient, dup("Your Task")),
        ("role section twice", format!("{HUI}\nInteraction Role:\nYou are Lan.\n"), Medium, lenient, dup("Interaction Role")),
        ("scenario twice", format!("{HUI}\nExposure Scenario:\nElsewhere.\n"), Medium, lenient, dup("Exposure Scenario")),
        ("single role at High", HUI.into(), High, lenient, RoleCountMismatch { expected: 2, found: 1 }),
        ("two roles at Medium", two.into(), Medium, lenient, RoleCountMismatch { expected: 1, found: 2 }),
        ("one labelled character at High", "Interaction Role:\nCharacter-1:\nYou are Chen.\n\nExposure Scenario:\nA chat.\n\nYour Task:\nTalk.\n".into(), High, lenient, RoleCountMismatch { expected: 2, found: 1 }),
        ("three characters at High", three.into(), High, lenient, RoleCountMismatch { expected: 2, found: 3 }),
        ("level line disagrees", format!("Exposure Level: High\n\n{HUI}"), Medium, lenient, LevelMismatch { expected: Medium, found: High }),
        ("unknown level word", format!("Exposure Level: extreme\n\n{HUI}"), Medium, lenient, UnknownLevel("extreme".into())),
        ("prose without headers", "Today you could try calling your friend about the homework. Good luck!".into(), Medium, lenient, missing("Interaction Role")),
        ("markdown header in strict mode", hui_with("Your Task:", "**Your Task:**"), Medium, strict, missing("Your Task")),
    ]
}

fn plan_grammar() -> Verdict {
    let mut problems = Vec::new();
    match parse_plan_card(HUI, ExposureLevel::Medium) {
        Ok(c) => {
            let role = c.roles.first().map(|r| r.profile_text.as_str()).unwrap_or("");
            let ok = c.roles.len() == 1
                && c.roles[0].name == "Hui"
                && role.starts_with("You are now my friend named Hui.")
                && role.ends_with("apartment number 1234.")
                && c.scenario_text.starts_with("On Friday after school")
                && c.scenario_text.ends_with("going back to school to get it.")
                && c.task_text == "You must return the homework to the other person’s hands."
                && c.hints.is_empty();
            if !ok {
                problems.push(format!("Hui partition {c:?}"));
            }
            if parse_plan_card(&render_plan_card(&c), ExposureLevel::Medium).as_ref() != Ok(&c) {
                problems.push("Hui round trip".into());
            }
        }
        Err(e) => problems.push(format!("Hui rejected: {e}")),
    }

    let mut round_trips = 1;
    for (level, roles) in [(ExposureLevel::Low, 1), (ExposureLevel::High, 2)] {
        let mut c = card(level, roles);
        c.roles[0].gender = Some(Gender::Female);
        c.hints = vec!["Start with a greeting.".into(), "Ask one question.".into()];
        round_trips += 1;
        if parse_plan_card(&render_plan_card(&c), level).as_ref() != Ok(&c) {
            problems.push(format!("{level} round trip"));
        }
    }

    let cases = malformed();
    for (name, text, level, opts, want) in &cases {
        match parse_plan_card_with(text, *level, *opts) {
            Err(got) if got == *want => {}
            other => problems.push(format!("{name}: expected {want:?}, got {:?}", other.map(|_| "a card"))),
        }
    }
    verdict(
        "plan card grammar",
        problems.is_empty(),
        format!(
            "Hui partition, {round_trips} round trip(s), {} malformed variant(s), {} problem(s){}",
            cases.len(),
            problems.len(),
            problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let draws = wilcoxon_draws();
    let runs = tempfile::tempdir().unwrap();
    let (a, b) = (runs.path().join("a"), runs.path().join("b"));
    let verdicts = vec![
        scale_machinery(),
        wilcoxon_exact(&draws),
        wilcoxon_normal(&draws),
        table_two(),
        protocol_schedule(),
        e2e_determinism(&a, &b),
        memory_isolation(&a),
        plan_grammar(),
    ];
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.passed).map(|v| v.name).collect();
    println!("{} of {} criteria passed", verdicts.len() - failed.len(), verdicts.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
