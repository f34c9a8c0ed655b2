//! Subcommand implementations. Exit codes: 0 success, 1 data violations,
//! 2 usage/IO errors. Diagnostics go to stderr, data to stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};

use tinker_core::brat::{self, AnnotationSet, StandoffParse};
use tinker_core::graph::{build_graph, AliasTable, KnowledgeGraph, Namespace};
use tinker_core::infer::{apply_rules_fixpoint, default_rules, parse_rules};
use tinker_core::ingest::{corpus_files, load_corpus, Document};
use tinker_core::ioc::{self, PatternSet};
use tinker_core::query::{self, cq_impact, cq_missing_info, cq_shared_features};
use tinker_core::rdf;
use tinker_core::schema::{default_schema, load_schema, OntologySchema};
use tinker_core::stats::{class_distribution_by_origin, coverage_cutoff, graph_summary};
use tinker_core::text::slug;

#[derive(Debug)]
pub enum CliError {
    /// Data-level violations: exit 1.
    Data(String),
    /// Usage or IO problems: exit 2.
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {}", context, e))
}

#[derive(Parser)]
#[command(name = "tinker", version, about = "Threat-report knowledge graph toolkit")]
pub struct Cli {
    /// Schema file (or the literal `default`)
    #[arg(long, global = true)]
    schema: Option<String>,
    /// Base URI namespace for entities, properties and classes
    #[arg(long, global = true)]
    namespace: Option<String>,
    /// Alias table TSV: surface<TAB>canonical label<TAB>class
    #[arg(long, global = true)]
    aliases: Option<PathBuf>,
    /// Worker threads for per-document stages
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check annotations against the schema; exit 1 on violations
    Validate { dir: PathBuf },
    /// Build a graph from a corpus directory
    Build {
        dir: PathBuf,
        /// Output N-Triples file (a .prov.jsonl sidecar is written beside it)
        #[arg(short, long)]
        output: PathBuf,
        /// Also auto-extract indicators as Indicator/Vulnerability entities
        #[arg(long)]
        with_iocs: bool,
    },
    /// Apply inference rules to a graph
    Infer {
        #[arg(short, long)]
        graph: PathBuf,
        /// Rules file; extends and toggles the default rule set
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run a basic-graph-pattern query; bindings as TSV
    Query {
        #[arg(short, long)]
        graph: PathBuf,
        query: String,
        /// Ignore inferred triples
        #[arg(long)]
        asserted_only: bool,
    },
    /// Competency-question templates
    #[command(subcommand)]
    Cq(CqCommand),
    /// Extract indicators of compromise; line-delimited JSON
    Iocs {
        dir: PathBuf,
        /// Override the built-in pattern set
        #[arg(long)]
        patterns: Option<PathBuf>,
    },
    /// Corpus annotation statistics
    Stats {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
        /// Coverage threshold for the cutoff set
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
    },
    /// Export a graph as dot, graphml or ttl
    Export {
        #[arg(short, long)]
        graph: PathBuf,
        #[arg(long)]
        format: ExportFormat,
        /// Output file; stdout when omitted
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CqCommand {
    /// Expected properties the entity does not head yet
    Missing {
        #[arg(short, long)]
        graph: PathBuf,
        entity: String,
        #[arg(long)]
        asserted_only: bool,
    },
    /// Same-class entity pairs sharing outgoing features
    Shared {
        #[arg(short, long)]
        graph: PathBuf,
        /// Minimum number of shared (relation, neighbor) pairs
        #[arg(short = 'k', long, default_value_t = 1)]
        min_shared: usize,
        #[arg(long)]
        asserted_only: bool,
    },
    /// Impact subgraph of a malware entity, as N-Triples
    Impact {
        #[arg(short, long)]
        graph: PathBuf,
        malware: String,
        #[arg(long)]
        asserted_only: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ExportFormat {
    Dot,
    Graphml,
    Ttl,
}

/// Settings resolved from defaults, `tinker.conf`, and flags, in
/// increasing precedence.
struct Settings {
    schema: Arc<OntologySchema>,
    namespace: Namespace,
    aliases: AliasTable,
    workers: usize,
    rules: Option<PathBuf>,
    patterns: Option<PathBuf>,
}

fn resolve_settings(cli: &Cli) -> Result<Settings> {
    let config = crate::config::Config::load_default()?;
    let schema_source = cli
        .schema
        .clone()
        .or_else(|| config.get("schema").map(str::to_string));
    let schema = match schema_source.as_deref() {
        None | Some("default") => default_schema(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            load_schema(&text).map_err(|e| CliError::Data(format!("{}: {}", path, e)))?
        }
    };
    let namespace = cli
        .namespace
        .clone()
        .or_else(|| config.get("namespace").map(str::to_string))
        .map(|ns| Namespace::new(&ns))
        .unwrap_or_default();
    let aliases_path = cli
        .aliases
        .clone()
        .or_else(|| config.get("aliases").map(PathBuf::from));
    let aliases = match aliases_path {
        None => AliasTable::empty(),
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(io_err(&path.display().to_string()))?;
            AliasTable::parse(&text)
                .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?
        }
    };
    let workers = cli
        .workers
        .or_else(|| config.get("workers").and_then(|w| w.parse().ok()))
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get().min(8))
                .unwrap_or(1)
        })
        .max(1);
    Ok(Settings {
        schema: Arc::new(schema),
        namespace,
        aliases,
        workers,
        rules: config.get("rules").map(PathBuf::from),
        patterns: config.get("patterns").map(PathBuf::from),
    })
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let settings = resolve_settings(&cli)?;
    match &cli.command {
        Command::Validate { dir } => cmd_validate(dir, &settings),
        Command::Build {
            dir,
            output,
            with_iocs,
        } => cmd_build(dir, output, *with_iocs, &settings),
        Command::Infer {
            graph,
            rules,
            output,
        } => cmd_infer(graph, rules.as_deref(), output, &settings),
        Command::Query {
            graph,
            query,
            asserted_only,
        } => cmd_query(graph, query, !*asserted_only, &settings),
        Command::Cq(cq) => cmd_cq(cq, &settings),
        Command::Iocs { dir, patterns } => cmd_iocs(dir, patterns.as_deref(), &settings),
        Command::Stats {
            dir,
            json,
            threshold,
        } => cmd_stats(dir, *json, *threshold, &settings),
        Command::Export {
            graph,
            format,
            output,
        } => cmd_export(graph, *format, output.as_deref(), &settings),
    }
}

/// Runs `job` over the items on `workers` threads, returning results in
/// item order so output never depends on scheduling.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    job: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(items.len()).max(1) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= items.len() {
                    break;
                }
                let result = job(&items[idx]);
                slots.lock().unwrap()[idx] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

/// Loads a corpus directory: documents sorted by docId, each with the
/// lenient parse of its `.ann` sibling (empty when absent).
fn load_annotated_corpus(
    dir: &Path,
    settings: &Settings,
) -> Result<Vec<(Document, StandoffParse)>> {
    let dir_str = dir.display().to_string();
    let docs = load_corpus(dir).map_err(io_err(&dir_str))?;
    let mut ann_paths: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in corpus_files(dir).map_err(io_err(&dir_str))? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        ann_paths.insert(slug(stem), path.with_extension("ann"));
    }
    let inputs: Vec<(Document, Option<String>)> = docs
        .into_iter()
        .map(|doc| {
            let ann = ann_paths
                .get(&doc.doc_id)
                .filter(|p| p.is_file())
                .map(|p| fs::read_to_string(p).map_err(io_err(&p.display().to_string())))
                .transpose()?;
            Ok((doc, ann))
        })
        .collect::<Result<_>>()?;
    let parses = parallel_map(&inputs, settings.workers, |(doc, ann)| match ann {
        Some(text) => brat::parse_standoff_lenient(text, doc),
        None => brat::parse_standoff_lenient("", doc),
    });
    Ok(inputs
        .into_iter()
        .map(|(doc, _)| doc)
        .zip(parses)
        .collect())
}

fn cmd_validate(dir: &Path, settings: &Settings) -> Result<ExitCode> {
    let corpus = load_annotated_corpus(dir, settings)?;
    let reports = parallel_map(&corpus, settings.workers, |(_, parse)| {
        let validation = brat::validate_annotations(&parse.set, &settings.schema);
        let ok = parse.errors.is_empty() && validation.ok();
        (brat::render_report(parse, Some(&validation)), ok)
    });
    let mut all_ok = true;
    for (report, ok) in reports {
        print!("{}", report);
        all_ok &= ok;
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn sidecar_path(nt_path: &Path) -> PathBuf {
    nt_path.with_extension("prov.jsonl")
}

fn cmd_build(dir: &Path, output: &Path, with_iocs: bool, settings: &Settings) -> Result<ExitCode> {
    let corpus = load_annotated_corpus(dir, settings)?;
    let mut failures = Vec::new();
    for (_, parse) in &corpus {
        for (line, err) in &parse.errors {
            failures.push(format!("{}:{}: {}", parse.set.doc_id, line, err));
        }
        let validation = brat::validate_annotations(&parse.set, &settings.schema);
        for finding in &validation.findings {
            failures.push(format!(
                "{}: {} {}",
                finding.doc_id,
                finding.kind,
                finding.message
            ));
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Data(failures.join("\n")));
    }
    let enriched = parallel_map(&corpus, settings.workers, |(doc, parse)| {
        let mut set = parse.set.clone();
        if with_iocs {
            let matches = ioc::extract_iocs(doc);
            set.entities.extend(ioc::to_entity_spans(&matches, &doc.doc_id));
        }
        set
    });
    let docs: Vec<Document> = corpus.into_iter().map(|(doc, _)| doc).collect();
    let kg = build_graph(
        &docs,
        &enriched,
        settings.schema.clone(),
        &settings.aliases,
        settings.namespace.clone(),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    write_graph(&kg, output)?;
    print!("{}", graph_summary(&kg).render_text());
    Ok(ExitCode::SUCCESS)
}

fn write_graph(kg: &KnowledgeGraph, output: &Path) -> Result<()> {
    let out_str = output.display().to_string();
    fs::write(output, rdf::serialize_ntriples(kg)).map_err(io_err(&out_str))?;
    let sidecar = sidecar_path(output);
    fs::write(&sidecar, rdf::serialize_sidecar(kg))
        .map_err(io_err(&sidecar.display().to_string()))?;
    Ok(())
}

fn load_graph(path: &Path, settings: &Settings) -> Result<KnowledgeGraph> {
    let path_str = path.display().to_string();
    let text = fs::read_to_string(path).map_err(io_err(&path_str))?;
    let mut kg = rdf::parse_ntriples(&text, settings.schema.clone(), &settings.namespace)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    let sidecar = sidecar_path(path);
    if sidecar.is_file() {
        let text = fs::read_to_string(&sidecar).map_err(io_err(&sidecar.display().to_string()))?;
        rdf::apply_sidecar(&mut kg, &text)
            .map_err(|e| CliError::Data(format!("{}: {}", sidecar.display(), e)))?;
    }
    Ok(kg)
}

fn cmd_infer(
    graph: &Path,
    rules_file: Option<&Path>,
    output: &Path,
    settings: &Settings,
) -> Result<ExitCode> {
    let kg = load_graph(graph, settings)?;
    let mut rules = default_rules(&settings.schema);
    let rules_file = rules_file.or(settings.rules.as_deref());
    if let Some(path) = rules_file {
        let text = fs::read_to_string(path).map_err(io_err(&path.display().to_string()))?;
        rules = parse_rules(&text, rules)
            .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    }
    let before = kg.triple_count();
    let result =
        apply_rules_fixpoint(&kg, &rules).map_err(|e| CliError::Data(e.to_string()))?;
    for warning in &result.warnings {
        eprintln!("warning: {}", warning);
    }
    eprintln!(
        "inferred {} new triple(s) in {} iteration(s)",
        result.graph.triple_count() - before,
        result.iterations
    );
    write_graph(&result.graph, output)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_query(
    graph: &Path,
    query_text: &str,
    include_inferred: bool,
    settings: &Settings,
) -> Result<ExitCode> {
    let kg = load_graph(graph, settings)?;
    let query =
        query::parse_query(query_text).map_err(|e| CliError::Usage(e.to_string()))?;
    let rows = query::evaluate(&kg, &query.patterns, &settings.aliases, include_inferred)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut lines: Vec<String> = rows
        .iter()
        .map(|binding| {
            query
                .selected
                .iter()
                .map(|v| binding[v].as_str())
                .collect::<Vec<_>>()
                .join("\t")
        })
        .collect();
    lines.sort();
    lines.dedup();
    for line in lines {
        println!("{}", line);
    }
    Ok(ExitCode::SUCCESS)
}

fn resolve_entity(kg: &KnowledgeGraph, text: &str, settings: &Settings) -> Result<String> {
    kg.resolve_label(text, &settings.aliases)
        .ok_or_else(|| CliError::Data(format!("unknown entity {:?}", text)))
}

fn cmd_cq(cq: &CqCommand, settings: &Settings) -> Result<ExitCode> {
    match cq {
        CqCommand::Missing {
            graph,
            entity,
            asserted_only,
        } => {
            let kg = load_graph(graph, settings)?;
            let id = resolve_entity(&kg, entity, settings)?;
            let missing = cq_missing_info(&kg, &id, !*asserted_only)
                .map_err(|e| CliError::Data(e.to_string()))?;
            for name in missing {
                println!("{}", name);
            }
        }
        CqCommand::Shared {
            graph,
            min_shared,
            asserted_only,
        } => {
            let kg = load_graph(graph, settings)?;
            for row in cq_shared_features(&kg, *min_shared, !*asserted_only) {
                let shared: Vec<String> = row
                    .shared
                    .iter()
                    .map(|(rel, tail)| format!("{}:{}", rel, tail))
                    .collect();
                println!("{}\t{}\t{}", row.entity_a, row.entity_b, shared.join(","));
            }
        }
        CqCommand::Impact {
            graph,
            malware,
            asserted_only,
        } => {
            let kg = load_graph(graph, settings)?;
            let id = resolve_entity(&kg, malware, settings)?;
            let sub =
                cq_impact(&kg, &id, !*asserted_only).map_err(|e| CliError::Data(e.to_string()))?;
            print!("{}", rdf::serialize_ntriples(&sub));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_iocs(dir: &Path, patterns: Option<&Path>, settings: &Settings) -> Result<ExitCode> {
    let patterns = patterns.or(settings.patterns.as_deref());
    let set = match patterns {
        None => None,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(&path.display().to_string()))?;
            Some(
                PatternSet::parse(&text)
                    .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?,
            )
        }
    };
    let docs = load_corpus(dir).map_err(io_err(&dir.display().to_string()))?;
    let outputs = parallel_map(&docs, settings.workers, |doc| {
        let matches = match &set {
            Some(set) => ioc::extract_iocs_with(doc, set),
            None => ioc::extract_iocs(doc),
        };
        ioc::render_jsonl(&doc.doc_id, &matches)
    });
    for chunk in outputs {
        print!("{}", chunk);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(dir: &Path, json: bool, threshold: f64, settings: &Settings) -> Result<ExitCode> {
    let corpus = load_annotated_corpus(dir, settings)?;
    let sets: Vec<AnnotationSet> = parallel_map(&corpus, settings.workers, |(doc, parse)| {
        let mut set = parse.set.clone();
        let matches = ioc::extract_iocs(doc);
        set.entities.extend(ioc::to_entity_spans(&matches, &doc.doc_id));
        set
    });
    let manual = class_distribution_by_origin(&sets, false);
    let auto = class_distribution_by_origin(&sets, true);
    let mut classes: Vec<&String> = manual.keys().chain(auto.keys()).collect();
    classes.sort();
    classes.dedup();
    let cutoff = if manual.is_empty() {
        Default::default()
    } else {
        coverage_cutoff(&manual, threshold).map_err(|e| CliError::Data(e.to_string()))?
    };
    if json {
        for class in &classes {
            let m = manual.get(*class).copied().unwrap_or(0);
            let a = auto.get(*class).copied().unwrap_or(0);
            println!(
                "{{\"kind\":\"class\",\"class\":\"{}\",\"manual\":{},\"auto\":{},\"total\":{}}}",
                class,
                m,
                a,
                m + a
            );
        }
        let names: Vec<String> = cutoff.iter().map(|c| format!("\"{}\"", c)).collect();
        println!(
            "{{\"kind\":\"coverage\",\"threshold\":{},\"classes\":[{}]}}",
            threshold,
            names.join(",")
        );
    } else {
        println!("{:<20} {:>7} {:>7} {:>7}", "class", "manual", "auto", "total");
        for class in &classes {
            let m = manual.get(*class).copied().unwrap_or(0);
            let a = auto.get(*class).copied().unwrap_or(0);
            println!("{:<20} {:>7} {:>7} {:>7}", class, m, a, m + a);
        }
        let total: usize = manual.values().sum();
        println!("manual spans: {}", total);
        let names: Vec<&str> = cutoff.iter().map(String::as_str).collect();
        println!(
            "{:.0}% coverage classes (manual): {}",
            threshold * 100.0,
            names.join(", ")
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(
    graph: &Path,
    format: ExportFormat,
    output: Option<&Path>,
    settings: &Settings,
) -> Result<ExitCode> {
    let kg = load_graph(graph, settings)?;
    let rendered = match format {
        ExportFormat::Dot => rdf::export_dot(&kg),
        ExportFormat::Graphml => rdf::export_graphml(&kg),
        ExportFormat::Ttl => rdf::serialize_turtle(&kg),
    };
    match output {
        Some(path) => {
            fs::write(path, rendered).map_err(io_err(&path.display().to_string()))?
        }
        None => print!("{}", rendered),
    }
    Ok(ExitCode::SUCCESS)
}
