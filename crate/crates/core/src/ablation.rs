//! Ablation harness: trains one detector per (arm, seed) and reports mAP
//! per arm next to the reference numbers of the original study.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::datagen::{gen_scenes, Split};
use crate::error::Result;
use crate::model::DetectionModel;
use crate::rda::MergeKind;
use crate::training::{evaluate_map, train};

/// One configuration of the study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Arm {
    pub name: String,
    /// 1: proposal/decomposition components, 2: assembly block variants.
    pub table: u8,
    pub scales: Vec<f32>,
    pub decomposition: bool,
    pub upsample: bool,
    pub merge: MergeKind,
    pub m: usize,
    /// Mean AP reported for this configuration in the original study.
    pub reference_map: f32,
}

impl Arm {
    fn new(name: &str, table: u8, scales: &[f32], decomposition: bool, upsample: bool, reference_map: f32) -> Arm {
        Arm {
            name: name.into(),
            table,
            scales: scales.to_vec(),
            decomposition,
            upsample,
            merge: MergeKind::Max,
            m: 3,
            reference_map,
        }
    }

    /// `base` with this arm's toggles applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.mrp.scale_set = self.scales.clone();
        cfg.rda.use_decomposition = self.decomposition;
        cfg.rda.use_upsample = self.upsample;
        cfg.rda.merge = self.merge;
        cfg.rda.m = self.m;
        cfg
    }
}

const S3: [f32; 3] = [0.7, 1.0, 1.5];
const S5: [f32; 5] = [0.5, 0.7, 1.0, 1.2, 1.5];

/// The seven columns of the component study, baseline first, full model last.
pub fn table1_arms() -> Vec<Arm> {
    vec![
        Arm::new("baseline", 1, &[1.0], false, false, 68.90),
        Arm::new("mrp-3", 1, &S3, false, false, 70.0),
        Arm::new("mrp-5", 1, &S5, false, false, 70.30),
        Arm::new("rda", 1, &[1.0], true, false, 71.95),
        Arm::new("mrp-3+rda", 1, &S3, true, false, 72.65),
        Arm::new("mrp-5+rda", 1, &S5, true, false, 73.90),
        Arm::new("mrp-5+rda+upsample", 1, &S5, true, true, 74.90),
    ]
}

/// Assembly-block variants on top of the full model.
pub fn table2_arms() -> Vec<Arm> {
    let full = |name: &str, merge, m, reference| Arm {
        merge,
        m,
        ..Arm::new(name, 2, &S5, true, true, reference)
    };
    vec![
        full("sum", MergeKind::Sum, 3, 69.61),
        full("max-max-concat", MergeKind::Concat, 3, 71.95),
        full("max-m5", MergeKind::Max, 5, 75.10),
        full("max-m3", MergeKind::Max, 3, 74.90),
    ]
}

pub fn find_arm(name: &str) -> Option<Arm> {
    table1_arms().into_iter().chain(table2_arms()).find(|a| a.name == name)
}

/// Trains `arm` with `seed` on the training split and returns its mAP on `split`.
pub fn run_arm(base: &RunConfig, arm: &Arm, seed: u64, split: Split) -> Result<Option<f32>> {
    let cfg = arm.apply(base).with_seed(seed);
    cfg.validate()?;
    let train_set = gen_scenes(&cfg.dataset.split(Split::Train))?;
    let eval_spec = cfg.dataset.split(split);
    let eval_set = if eval_spec.num_images > 0 {
        gen_scenes(&eval_spec)?
    } else {
        Vec::new()
    };
    let mut model = DetectionModel::new(&cfg.model_config())?;
    train(&mut model, &train_set, &[], &cfg.training, &cfg.eval, |_| {})?;
    evaluate_map(&model, &eval_set, &cfg.eval)
}

/// Median of the defined values (mean of the middle pair for even counts).
pub fn median(values: &[Option<f32>]) -> Option<f32> {
    let mut v: Vec<f32> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f32::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    /// mAP per seed, in `seeds` order.
    pub maps: Vec<Option<f32>>,
}

impl ArmResult {
    pub fn median(&self) -> Option<f32> {
        median(&self.maps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub results: Vec<ArmResult>,
}

fn pct(v: Option<f32>) -> String {
    v.map_or_else(|| "n/a".into(), |m| format!("{:.2}", 100.0 * m))
}

fn check(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&ArmResult> {
        self.results.iter().find(|r| r.arm.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("table,arm,scales,decomposition,upsample,merge,m");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push_str(",median,reference\n");
        for r in &self.results {
            let a = &r.arm;
            let scales: Vec<String> = a.scales.iter().map(|x| x.to_string()).collect();
            let _ = write!(
                s,
                "{},{},{},{},{},{:?},{}",
                a.table,
                a.name,
                scales.join(" "),
                a.decomposition,
                a.upsample,
                a.merge,
                a.m
            );
            for m in &r.maps {
                let _ = write!(s, ",{}", pct(*m));
            }
            let _ = writeln!(s, ",{},{:.2}", pct(r.median()), a.reference_map);
        }
        s
    }

    /// Component study with arms as columns (as in the original layout),
    /// followed by the assembly-block study with arms as rows.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let t1: Vec<&ArmResult> = self.results.iter().filter(|r| r.arm.table == 1).collect();
        if !t1.is_empty() {
            let _ = write!(s, "| Method |");
            for r in &t1 {
                let _ = write!(s, " {} |", r.arm.name);
            }
            s.push_str("\n|---|");
            s.push_str(&"---|".repeat(t1.len()));
            s.push('\n');
            let row = |s: &mut String, label: &str, f: &dyn Fn(&ArmResult) -> String| {
                let _ = write!(s, "| {label} |");
                for r in &t1 {
                    let _ = write!(s, " {} |", f(r));
                }
                s.push('\n');
            };
            row(&mut s, "Multi-scale s=[0.7, 1.0, 1.5]", &|r| {
                check(r.arm.scales == S3).into()
            });
            row(&mut s, "Multi-scale s=[0.5, 0.7, 1.0, 1.2, 1.5]", &|r| {
                check(r.arm.scales == S5).into()
            });
            row(&mut s, "Decomposition/assembly", &|r| check(r.arm.decomposition).into());
            row(&mut s, "Up-sampling", &|r| check(r.arm.upsample).into());
            for (i, seed) in self.seeds.iter().enumerate() {
                row(&mut s, &format!("mAP seed {seed}"), &|r| {
                    pct(r.maps.get(i).copied().flatten())
                });
            }
            row(&mut s, "**mAP median**", &|r| pct(r.median()));
            row(&mut s, "Reference mean AP", &|r| format!("{:.2}", r.arm.reference_map));
        }
        let t2: Vec<&ArmResult> = self.results.iter().filter(|r| r.arm.table == 2).collect();
        if !t2.is_empty() {
            if !s.is_empty() {
                s.push('\n');
            }
            s.push_str("| Stage 1 | Stage 2 | Stage 3 |");
            for seed in &self.seeds {
                let _ = write!(s, " seed {seed} |");
            }
            s.push_str(" median | reference |\n|---|---|---|");
            s.push_str(&"---|".repeat(self.seeds.len() + 2));
            s.push('\n');
            for r in t2 {
                let a = &r.arm;
                let label = |stage| {
                    let kind = match a.merge.at_stage(stage) {
                        MergeKind::Max => "Max",
                        MergeKind::Sum => "Sum",
                        MergeKind::Concat => "Concatenation",
                    };
                    if stage < 3 && a.m != 3 {
                        format!("{kind} (m={})", a.m)
                    } else {
                        kind.to_string()
                    }
                };
                let _ = write!(s, "| {} | {} | {} |", label(1), label(2), label(3));
                for m in &r.maps {
                    let _ = write!(s, " {} |", pct(*m));
                }
                let _ = writeln!(s, " {} | {:.2} |", pct(r.median()), a.reference_map);
            }
        }
        s
    }
}

/// Trains and evaluates every arm for every seed, in order.
pub fn ablation_report(
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    split: Split,
    mut progress: impl FnMut(&Arm, u64, Option<f32>),
) -> Result<AblationReport> {
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut maps = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let m = run_arm(base, arm, seed, split)?;
            progress(arm, seed, m);
            maps.push(m);
        }
        results.push(ArmResult { arm: arm.clone(), maps });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        results,
    })
}
