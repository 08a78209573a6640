use std::io::Read as _;
use std::path::PathBuf;
use std::process::ExitCode;

use ahat::circuit::evaluator::{build_circuit_evaluator, run_evaluator};
use ahat::circuit::{
    bits, compose_parallel, compose_recurrent, compose_serial, is_wide_witness, parse_circuit, Circuit,
};
use ahat::compile::{compile, CompileOptions, Mutation};
use ahat::error::Error;
use ahat::fuzz::{run_suite, CaseKind, FuzzParams, Verdict as FuzzVerdict};
use ahat::ir::TransformerIR;
use ahat::logic::{enumerate_language, eval_sentence, formula_metrics, parse_formula, Formula};
use ahat::mask::to_causal;
use ahat::poly::Poly;
use ahat::rational::Rational;
use ahat::reduce::{membership_r, reduction_transformer, stack, stack_builtin, BinaryIndex, Reduction, StackBounds};
use ahat::sim::{parse_alphabet, run_with, Outcome, RunOptions, TraceOptions, Verdict};
use clap::{Args, Parser, Subcommand};

/// Default channel subset for traces, as a comma-separated list.
const TRACE_ENV: &str = "AHAT_TRACE_CHANNELS";

#[derive(Parser)]
#[command(name = "ahat", version, about = "Exact averaging-hard-attention transformer toolkit")]
struct Cli {
    /// Exit with status 1 when a decision is negative.
    #[arg(long, global = true)]
    exit_code: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// First-order formulas with majority.
    #[command(subcommand)]
    Fo(Fo),
    /// Run a transformer IR on a word and print its decision.
    Run(RunArgs),
    /// Run and print the residual trace as JSON lines.
    Trace(RunArgs),
    /// Convert an IR with unmasked heads into a causal one.
    ConvertMask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also print the added padding at this length.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Threshold circuits.
    #[command(subcommand)]
    Circuit(Circ),
    /// Reductions and stacking.
    #[command(subcommand)]
    Reduce(Red),
    /// Differential fuzzing; prints one JSON record per case.
    Fuzz(FuzzArgs),
}

#[derive(Args)]
struct WordArgs {
    #[arg(long)]
    word: String,
    /// File listing the alphabet, whitespace separated, for multi-character tokens.
    #[arg(long)]
    alphabet: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Fo {
    /// Print the canonical form, variable count and depth.
    Parse { formula: String },
    Eval {
        formula: String,
        #[command(flatten)]
        word: WordArgs,
    },
    /// List the accepted words up to a length.
    Enum {
        formula: String,
        #[arg(long, default_value = "ab")]
        symbols: String,
        #[arg(long, default_value_t = 4)]
        max_len: usize,
    },
    /// Compile to an IR file (JSON).
    Compile {
        formula: String,
        #[arg(long, default_value = "ab")]
        symbols: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    ir: PathBuf,
    #[command(flatten)]
    word: WordArgs,
    /// Override the loop count.
    #[arg(long)]
    loops: Option<usize>,
    /// Write the residual trace here (`run` only).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Channels to record, comma separated; defaults to $AHAT_TRACE_CHANNELS, then all.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Circ {
    /// Validate and print the canonical serialization.
    Parse { #[arg(long)] file: PathBuf },
    Eval {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        input: String,
        /// Use the looped evaluator transformer instead of direct evaluation.
        #[arg(long)]
        transformer: bool,
    },
    Depth { #[arg(long)] file: PathBuf },
    /// Check depth ≤ c·(log₂ n)^d and size ≥ n^c.
    WideCheck {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        c: String,
        #[arg(long)]
        d: u32,
    },
    /// Emit the looped evaluator with loop count c·⌈log₂ N⌉^d.
    CompileEvaluator {
        #[arg(long, default_value_t = 1)]
        d: u32,
        #[arg(long, default_value_t = 2)]
        c: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    Compose {
        #[arg(value_parser = ["serial", "parallel", "recurrent"])]
        mode: String,
        #[arg(long)]
        f: PathBuf,
        #[arg(long)]
        g: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        r: usize,
    },
}

#[derive(Subcommand)]
enum Red {
    /// Apply a built-in reduction (identity, reverse, duplicate).
    Apply {
        name: String,
        #[command(flatten)]
        word: WordArgs,
    },
    /// Is (w, b, σ) in R_f?
    Member {
        name: String,
        #[command(flatten)]
        word: WordArgs,
        /// Binary index, most significant bit first.
        #[arg(long)]
        index: String,
        #[arg(long)]
        symbol: String,
    },
    /// Stack T_L on top of T_f and write the result.
    Stack {
        /// IR file of T_f, or a built-in reduction name.
        #[arg(long)]
        tf: String,
        #[arg(long)]
        tl: PathBuf,
        #[arg(long)]
        max_n: usize,
        /// Output length bound coefficient·n^degree (required for an IR file T_f).
        #[arg(long)]
        coefficient: Option<u64>,
        #[arg(long)]
        degree: Option<u32>,
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(value_parser = ["formulas", "circuits", "mask", "stack"])]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 4)]
    max_len: usize,
    #[arg(long, default_value_t = 2)]
    max_k: usize,
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    /// Plant the ∀ off-by-one defect in compiled formulas.
    #[arg(long)]
    mutant: bool,
}

enum Failure {
    Usage(String),
    Domain(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse(_) => Failure::Usage(e.to_string()),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

type Res<T> = Result<T, Failure>;

fn read_source(path: &str) -> Res<String> {
    if path == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map_err(|e| Failure::Usage(format!("stdin: {e}")))?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{path}: {e}")))
    }
}

fn read_path(p: &PathBuf) -> Res<String> {
    read_source(&p.to_string_lossy())
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Res<()> {
    match out {
        Some(p) if p.as_os_str() != "-" => {
            std::fs::write(p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
        _ => {
            println!("{text}");
            Ok(())
        }
    }
}

/// A formula argument, or `-` for standard input.
fn formula_arg(s: &str) -> Res<Formula> {
    let text = if s == "-" { read_source("-")? } else { s.to_string() };
    Ok(parse_formula(text.trim())?)
}

fn load_ir(p: &PathBuf) -> Res<TransformerIR> {
    Ok(TransformerIR::from_json(&read_path(p)?)?)
}

fn load_circuit(p: &PathBuf) -> Res<Circuit> {
    Ok(parse_circuit(&read_path(p)?)?)
}

fn symbols(s: &str) -> Vec<String> {
    s.chars().map(|c| c.to_string()).collect()
}

/// Single characters, or tokens of the alphabet manifest.
fn tokenize(w: &WordArgs) -> Res<Vec<String>> {
    match &w.alphabet {
        None => Ok(symbols(&w.word)),
        Some(p) => Ok(ahat::sim::tokenize(&w.word, &parse_alphabet(&read_path(p)?)?)?),
    }
}

fn trace_channels(flag: &Option<Vec<usize>>) -> Res<Option<Vec<usize>>> {
    if flag.is_some() {
        return Ok(flag.clone());
    }
    match std::env::var(TRACE_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .split(',')
            .map(|c| c.trim().parse().map_err(|_| Failure::Usage(format!("{TRACE_ENV}: bad channel {c:?}"))))
            .collect::<Res<Vec<usize>>>()
            .map(Some),
        _ => Ok(None),
    }
}

fn execute(a: &RunArgs, record: bool) -> Res<Outcome> {
    let ir = load_ir(&a.ir)?;
    let w = tokenize(&a.word)?;
    let trace = TraceOptions { snapshots: record, channels: trace_channels(&a.channels)?, attention: false };
    Ok(run_with(&ir, &w, &RunOptions { loops: a.loops, trace })?)
}

/// Prints a decision; returns whether it was positive.
fn decision(o: &Outcome) -> bool {
    match &o.verdict {
        Verdict::Bool(b) => {
            println!("{}", if *b { "accept" } else { "reject" });
            *b
        }
        Verdict::Token(t) => {
            println!("{t}");
            true
        }
    }
}

fn fo(cmd: Fo) -> Res<bool> {
    match cmd {
        Fo::Parse { formula } => {
            let f = formula_arg(&formula)?;
            let (k, d) = formula_metrics(&f);
            println!("{f}");
            println!("k = {k}, depth = {d}, sentence = {}", f.is_sentence());
            Ok(true)
        }
        Fo::Eval { formula, word } => {
            let f = formula_arg(&formula)?;
            let v = eval_sentence(&f, &tokenize(&word)?)?;
            println!("{v}");
            Ok(v)
        }
        Fo::Enum { formula, symbols: s, max_len } => {
            let f = formula_arg(&formula)?;
            for w in enumerate_language(&f, &symbols(&s), max_len)? {
                println!("{}", if w.is_empty() { "ε".to_string() } else { w.concat() });
            }
            Ok(true)
        }
        Fo::Compile { formula, symbols: s, out } => {
            let f = formula_arg(&formula)?;
            let art = compile(&f, &symbols(&s), &CompileOptions::default())?;
            eprintln!("k = {}, depth = {}, sublayers = {}", art.k, art.depth, art.transformer.depth(1));
            write_or_print(&out, &art.transformer.to_json())?;
            Ok(true)
        }
    }
}

fn circuit(cmd: Circ) -> Res<bool> {
    match cmd {
        Circ::Parse { file } => {
            let c = load_circuit(&file)?;
            println!("{c}");
            println!("arity = {}, size = {}, depth = {}", c.arity(), c.size(), c.depth());
            Ok(true)
        }
        Circ::Eval { file, input, transformer } => {
            let c = load_circuit(&file)?;
            let x = bits(&input)?;
            if x.len() != c.arity() {
                return Err(Failure::Usage(format!("circuit has {} inputs, got {}", c.arity(), x.len())));
            }
            let v = if transformer {
                let (ir, _) = build_circuit_evaluator(0, c.depth() as u64 + 1);
                run_evaluator(&ir, &c, &x, None)?.accepted()
            } else {
                c.eval(&x)?
            };
            println!("{}", v as u8);
            Ok(v)
        }
        Circ::Depth { file } => {
            println!("{}", load_circuit(&file)?.depth());
            Ok(true)
        }
        Circ::WideCheck { file, n, c, d } => {
            let circ = load_circuit(&file)?;
            let c: Rational = c.parse().map_err(|e| Failure::Usage(format!("{e}")))?;
            let v = is_wide_witness(&circ, n, &c, d);
            println!("{v}");
            Ok(v)
        }
        Circ::CompileEvaluator { d, c, out } => {
            let (ir, _) = build_circuit_evaluator(d, c);
            write_or_print(&out, &ir.to_json())?;
            Ok(true)
        }
        Circ::Compose { mode, f, g, r } => {
            let f = load_circuit(&f)?;
            let other = || -> Res<Circuit> {
                load_circuit(g.as_ref().ok_or_else(|| Failure::Usage(format!("{mode} composition needs --g")))?)
            };
            let out = match mode.as_str() {
                "serial" => compose_serial(&f, &other()?)?,
                "parallel" => compose_parallel(&f, &other()?)?,
                _ => compose_recurrent(&f, r)?,
            };
            println!("{out}");
            Ok(true)
        }
    }
}

fn reduce(cmd: Red) -> Res<bool> {
    match cmd {
        Red::Apply { name, word } => {
            let f = Reduction::by_name(&name)?;
            println!("{}", f.apply(&tokenize(&word)?).concat());
            Ok(true)
        }
        Red::Member { name, word, index, symbol } => {
            let f = Reduction::by_name(&name)?;
            let v = membership_r(f, &tokenize(&word)?, &BinaryIndex::parse(&index)?, &symbol);
            println!("{v}");
            Ok(v)
        }
        Red::Stack { tf, tl, max_n, coefficient, degree, bits, out } => {
            let tl = load_ir(&tl)?;
            let st = match Reduction::by_name(&tf) {
                Ok(f) => {
                    let (c0, d0) = f.length_bound();
                    if coefficient.unwrap_or(c0) != c0 || degree.unwrap_or(d0) != d0 || bits.is_some() {
                        let (c, d) = (coefficient.unwrap_or(c0), degree.unwrap_or(d0));
                        let b = match bits {
                            Some(b) => b,
                            None => ahat::reduce::bits_for(c, d, &tl, max_n)?,
                        };
                        let t = reduction_transformer(f, &tl.input_alphabet(), b)?;
                        stack(&t, &tl, &StackBounds { coefficient: c, degree: d, bits: b, max_n })?
                    } else {
                        stack_builtin(f, &tl, max_n)?
                    }
                }
                Err(_) => {
                    let tf = load_ir(&PathBuf::from(&tf))?;
                    let (Some(c), Some(d)) = (coefficient, degree) else {
                        return Err(Failure::Usage("an IR file T_f needs --coefficient and --degree".into()));
                    };
                    let b = match bits {
                        Some(b) => b,
                        None => ahat::reduce::bits_for(c, d, &tl, max_n)?,
                    };
                    stack(&tf, &tl, &StackBounds { coefficient: c, degree: d, bits: b, max_n })?
                }
            };
            eprintln!(
                "blocks = {}, block size = {}, index bits = {}",
                st.blocks, st.block_size, st.bounds.bits
            );
            write_or_print(&out, &st.transformer.to_json())?;
            Ok(true)
        }
    }
}

fn fuzz(a: FuzzArgs) -> Res<bool> {
    let kind = CaseKind::by_name(&a.kind)?;
    if !(1..=3).contains(&a.max_k) || a.max_depth < 2 {
        return Err(Failure::Usage("need 1 ≤ max-k ≤ 3 and max-depth ≥ 2".into()));
    }
    let p = FuzzParams {
        max_len: a.max_len,
        max_k: a.max_k,
        max_depth: a.max_depth,
        mutation: a.mutant.then_some(Mutation::ForallOffByOne),
        ..Default::default()
    };
    let reports = run_suite(kind, a.seed, a.cases, &p, a.threads);
    let mut clean = true;
    for r in &reports {
        clean &= r.verdict == FuzzVerdict::Pass;
        println!("{}", serde_json::to_string(r).expect("reports serialize"));
    }
    Ok(clean)
}

fn dispatch(cli: Cli) -> Res<bool> {
    match cli.cmd {
        Cmd::Fo(c) => fo(c),
        Cmd::Run(a) => {
            let o = execute(&a, a.trace.is_some())?;
            if let Some(p) = &a.trace {
                std::fs::write(p, o.trace.to_jsonl()).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            }
            if o.stats.uncertified_ties > 0 {
                eprintln!("warning: {} uncertified attention ties", o.stats.uncertified_ties);
            }
            Ok(decision(&o))
        }
        Cmd::Trace(a) => {
            let o = execute(&a, true)?;
            print!("{}", o.trace.to_jsonl());
            Ok(true)
        }
        Cmd::ConvertMask { input, output, n } => {
            let t = load_ir(&input)?;
            let conv = to_causal(&t)?;
            for w in &conv.warnings {
                eprintln!("warning: {w}");
            }
            std::fs::write(&output, conv.transformer.to_json())
                .map_err(|e| Failure::Usage(format!("{}: {e}", output.display())))?;
            let before = Poly::from_padding(&t.padding)?;
            let after = Poly::from_padding(&conv.transformer.padding)?;
            println!("padding: {before} -> {after}");
            if let Some(n) = n {
                println!("added at n = {n}: {}", conv.added_padding(&t, n));
            }
            Ok(true)
        }
        Cmd::Circuit(c) => circuit(c),
        Cmd::Reduce(c) => reduce(c),
        Cmd::Fuzz(a) => fuzz(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let strict = cli.exit_code;
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(if strict { 1 } else { 0 }),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
