use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;
use visipruner_core::cost::{
    convention_deltas, pruned_flops, sweep_csv, Convention, ConventionDelta, CostParams, FlopsReport, ScheduleSummary,
};

use crate::config::Format;
use crate::output::{core, resolve_out, to_json, write_files, Failure, Judgment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ConventionArg {
    Paper,
    Mac,
    Both,
}

#[derive(Debug, Clone, clap::Args)]
pub struct FlopsArgs {
    /// LLaVA-1.5-7B shape with the reconstructed schedule.
    #[arg(long)]
    pub llava7b_preset: bool,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub n_vision: Option<usize>,
    #[arg(long)]
    pub n_text: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub filtering_layer: Option<usize>,
    #[arg(long)]
    pub exit_layer: Option<usize>,
    /// Vision tokens kept in the middle layers.
    #[arg(long)]
    pub retained: Option<usize>,
    /// Do not skip vision rows in the shallow layers.
    #[arg(long)]
    pub no_skip: bool,
    #[arg(long, value_enum, default_value = "both")]
    pub convention: ConventionArg,
    /// `n_v=START..END[:STEP]`; STEP defaults to START.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn missing(flag: &str) -> Failure {
    Failure::config(format!("--{flag} is required without --llava7b-preset"), Some(format!("--{flag}")))
}

pub fn params_from(args: &FlopsArgs) -> Result<CostParams, Failure> {
    let base = args.llava7b_preset.then(CostParams::llava7b);
    let pick = |flag: Option<usize>, preset: Option<usize>, name: &str| flag.or(preset).ok_or_else(|| missing(name));
    let n_vision = pick(args.n_vision, base.as_ref().map(|b| b.n_vision), "n-vision")?;
    let mut schedule = base.as_ref().and_then(|b| b.schedule.clone());
    if schedule.is_none() && args.filtering_layer.is_some() {
        schedule = Some(ScheduleSummary {
            filtering_layer: None,
            exit_layer: None,
            retained: 0,
            merge_layer: 1,
            merge: true,
            probe_start_layer: 2,
            skip: true,
            probing: true,
            reference_pass: false,
        });
    }
    if let Some(s) = schedule.as_mut() {
        if let Some(f) = args.filtering_layer {
            s.filtering_layer = Some(f);
        }
        if args.exit_layer.is_some() {
            s.exit_layer = args.exit_layer;
        }
        s.retained = args.retained.unwrap_or(s.retained.min(n_vision));
        s.skip = !args.no_skip;
    } else if args.exit_layer.is_some() || args.retained.is_some() {
        return Err(Failure::config(
            "--exit-layer and --retained need --filtering-layer",
            Some("--filtering-layer".into()),
        ));
    }
    let p = CostParams {
        num_layers: pick(args.num_layers, base.as_ref().map(|b| b.num_layers), "num-layers")?,
        hidden_dim: pick(args.hidden_dim, base.as_ref().map(|b| b.hidden_dim), "hidden-dim")?,
        ffn_dim: pick(args.ffn_dim, base.as_ref().map(|b| b.ffn_dim), "ffn-dim")?,
        n_vision,
        n_text: pick(args.n_text, base.as_ref().map(|b| b.n_text), "n-text")?,
        vocab_size: args.vocab_size.or(base.as_ref().map(|b| b.vocab_size)).unwrap_or(0),
        schedule,
    };
    p.validate().map_err(|e| Failure::config(e.to_string(), Some("schedule".into())))?;
    Ok(p)
}

/// Parses `n_v=START..END[:STEP]`.
pub fn parse_sweep(spec: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::config(format!("sweep {spec:?} is not n_v=START..END[:STEP]"), Some("--sweep".into()));
    let range = spec.strip_prefix("n_v=").ok_or_else(bad)?;
    let (range, step) = match range.split_once(':') {
        Some((r, s)) => (r, Some(s.parse::<usize>().map_err(|_| bad())?)),
        None => (range, None),
    };
    let (a, b) = range.split_once("..").ok_or_else(bad)?;
    let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    let step = step.unwrap_or(a);
    if step == 0 || a > b {
        return Err(bad());
    }
    Ok((a..=b).step_by(step).collect())
}

#[derive(Serialize)]
struct FlopsFacts {
    params: CostParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    paper: Option<FlopsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mac: Option<FlopsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    convention_deltas: Option<Vec<ConventionDelta>>,
}

#[derive(Serialize)]
struct FlopsDocument {
    version: u32,
    facts: FlopsFacts,
    judgments: Vec<Judgment>,
    warnings: Vec<String>,
}

/// Published headline figures and the brackets they are checked with.
pub const DENSE_TFLOPS: f64 = 3.82e12;
pub const DENSE_TOLERANCE: f64 = 0.15;
pub const R_BRACKET: (f64, f64) = (0.98, 0.9995);
pub const VISUAL_REDUCTION: f64 = 0.628;
pub const TOTAL_REDUCTION: f64 = 0.539;
pub const REDUCTION_TOLERANCE: f64 = 0.03;

/// Checks of the LLaVA preset against the published figures.
pub fn headline_judgments(paper: &FlopsReport) -> Vec<Judgment> {
    let dense = paper.dense_total as f64;
    let r = paper.visual_attention_reduction;
    let published = paper.published.as_ref();
    let visual = published.map_or(f64::NAN, |a| a.visual_reduction);
    let total = published.map_or(f64::NAN, |a| a.total_reduction);
    vec![
        Judgment::new(
            "dense-total-near-published",
            "paper",
            (dense / DENSE_TFLOPS - 1.0).abs() <= DENSE_TOLERANCE,
            json!(dense),
            json!({ "target": DENSE_TFLOPS, "relative_tolerance": DENSE_TOLERANCE }),
        ),
        Judgment::new(
            "vision-attention-reduction-in-bracket",
            "paper",
            (R_BRACKET.0..=R_BRACKET.1).contains(&r),
            json!(r),
            json!({ "low": R_BRACKET.0, "high": R_BRACKET.1 }),
        ),
        Judgment::new(
            "visual-flops-reduction-near-published",
            "paper.published",
            (visual - VISUAL_REDUCTION).abs() <= REDUCTION_TOLERANCE,
            json!(visual),
            json!({ "target": VISUAL_REDUCTION, "absolute_tolerance": REDUCTION_TOLERANCE }),
        ),
        Judgment::new(
            "total-flops-reduction-near-published",
            "paper.published",
            (total - TOTAL_REDUCTION).abs() <= REDUCTION_TOLERANCE,
            json!(total),
            json!({ "target": TOTAL_REDUCTION, "absolute_tolerance": REDUCTION_TOLERANCE }),
        ),
    ]
}

fn breakdown_csv(reports: &[&FlopsReport]) -> String {
    let mut out = String::from("convention,category,dense,pruned\n");
    for r in reports {
        let conv = match r.convention {
            Convention::Paper => "paper",
            Convention::Mac => "mac",
        };
        let (d, p) = (&r.dense_breakdown, &r.pruned_breakdown);
        let rows = [
            ("attn-projections", d.attn_projections, p.attn_projections),
            ("attn-scores", d.attn_scores, p.attn_scores),
            ("ffn", d.ffn, p.ffn),
            ("unembed", d.unembed, p.unembed),
            ("probe", d.probe, p.probe),
            ("fallback", d.fallback, p.fallback),
            ("total", r.dense_total, r.pruned_total),
        ];
        for (c, a, b) in rows {
            out.push_str(&format!("{conv},{c},{a},{b}\n"));
        }
    }
    out
}

pub fn cmd_flops(args: FlopsArgs) -> Result<(PathBuf, Vec<String>), Failure> {
    let params = params_from(&args)?;
    let sweep = args.sweep.as_deref().map(parse_sweep).transpose()?;
    if args.format == Format::Jsonl {
        return Err(Failure::config("flops writes json or csv", Some("--format".into())));
    }
    let want = |c: ConventionArg| args.convention == c || args.convention == ConventionArg::Both;
    let paper = want(ConventionArg::Paper)
        .then(|| core(pruned_flops(&params, Convention::Paper)))
        .transpose()?;
    let mac = want(ConventionArg::Mac)
        .then(|| core(pruned_flops(&params, Convention::Mac)))
        .transpose()?;
    let deltas = match (&paper, &mac) {
        (Some(p), Some(m)) => Some(convention_deltas(&p.pruned_breakdown, &m.pruned_breakdown)),
        _ => None,
    };
    let mut warnings = Vec::new();
    if params.n_vision == 0 {
        warnings.push("n_vision = 0: the report is degenerate and every reduction is 0 by convention".to_string());
    }
    let judgments = match &paper {
        Some(p) if args.llava7b_preset && params == CostParams::llava7b() => headline_judgments(p),
        _ => Vec::new(),
    };
    let mut files = Vec::new();
    match args.format {
        Format::Csv => {
            let reports: Vec<&FlopsReport> = paper.iter().chain(mac.iter()).collect();
            files.push(("flops.csv".to_string(), breakdown_csv(&reports).into_bytes()));
        }
        _ => {
            let doc = FlopsDocument {
                version: crate::config::CONFIG_VERSION,
                facts: FlopsFacts {
                    params: params.clone(),
                    paper,
                    mac,
                    convention_deltas: deltas,
                },
                judgments,
                warnings: warnings.clone(),
            };
            files.push(("flops.json".to_string(), to_json(&doc)?));
        }
    }
    if let Some(nv) = sweep {
        files.push(("sweep.csv".to_string(), core(sweep_csv(&params, &nv))?.into_bytes()));
    }
    let dir = resolve_out(args.out, None);
    write_files(&dir, &files)?;
    Ok((dir, warnings))
}
