//! A small schools/satscores workspace with scripted backends.
//!
//! The five benchmark tasks are built so their outcomes are known in advance:
//! three are answered by the primary backend, one needs one fallback attempt,
//! and one exhausts the ladder.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use rusqlite::Connection;
use serde::Serialize;

use crate::extractor::{DocKind, DocSegment, EvidenceEntry, EvidenceMap};
use crate::pipeline::Backends;
use crate::gateway::{scripted_sequence_backend, BackendSpec, Pricing, Role, ScriptedReply, DEFAULT_EMBEDDING_DIM};

pub const SCHOOLS_DB_ID: &str = "schools";

const SCHEMA: &str = "
CREATE TABLE schools (
    cdscode TEXT PRIMARY KEY,
    sname TEXT NOT NULL,
    charter TEXT NOT NULL
);
CREATE TABLE satscores (
    cds TEXT PRIMARY KEY REFERENCES schools(cdscode),
    numge1500 INTEGER NOT NULL,
    numtsttakr INTEGER NOT NULL
);
INSERT INTO schools VALUES
    ('01', 'Alpha High', 'Y'),
    ('02', 'Bay Charter', 'Y'),
    ('03', 'Cedar High', 'N'),
    ('04', 'Delta Prep', 'Y'),
    ('05', 'Elm High', 'N'),
    ('06', 'Fir Academy', 'N');
INSERT INTO satscores VALUES
    ('01', 80, 100),
    ('02', 30, 100),
    ('03', 50, 100),
    ('04', 90, 120),
    ('05', 20, 80),
    ('06', 60, 100);
";

/// Create the two-table schools database at `path`, replacing any existing file.
pub fn create_schools_db(path: &Path) -> rusqlite::Result<()> {
    if path.exists() {
        let _ = fs::remove_file(path);
    }
    let conn = Connection::open(path)?;
    conn.execute_batch(SCHEMA)
}

pub fn schools_docs() -> Vec<DocSegment> {
    let d = |id: &str, kind: DocKind, text: &str| DocSegment {
        id: id.into(),
        kind,
        text: text.into(),
        embedding: Vec::new(),
    };
    vec![
        d("t_schools", DocKind::TableMeaning, "Table schools lists every school with its CDS code, name and charter status."),
        d("t_satscores", DocKind::TableMeaning, "Table satscores holds SAT results per school: test takers and students scoring 1500 or more."),
        d("c_charter", DocKind::ColumnDefinition, "Column schools.charter is the charter flag: 'Y' marks charter schools, 'N' marks non-charter schools."),
        d("c_sname", DocKind::ColumnDefinition, "Column schools.sname is the school name."),
        d("c_cds", DocKind::ColumnDefinition, "Column satscores.cds is the school CDS code and joins to schools.cdscode."),
        d("c_numge1500", DocKind::ColumnDefinition, "Column satscores.numge1500 counts SAT test takers whose total score is 1500 or above."),
        d("c_numtsttakr", DocKind::ColumnDefinition, "Column satscores.numtsttakr counts SAT test takers at the school."),
        d("r_excellence", DocKind::BusinessRule, "The excellence rate of a school is numge1500 divided by numtsttakr."),
    ]
}

pub fn schools_evidence() -> EvidenceMap {
    let e = |term: &str, value: &str| EvidenceEntry {
        nl_term: term.into(),
        table: "schools".into(),
        column: "charter".into(),
        db_value: value.into(),
    };
    EvidenceMap {
        entries: vec![e("charter schools", "Y"), e("non-charter schools", "N")],
    }
}

pub const EXCELLENCE_QUESTION: &str = "List the names of charter schools whose excellence rate is above the average excellence rate.";

pub const EXCELLENCE_PLAN: &str = "```plan
ENTITIES
charter schools\tschools.charter\tcharter = 'Y'
school names\tschools.sname
excellence rate\texpr:CAST(satscores.numge1500 AS REAL) / satscores.numtsttakr\tper school
CONDITIONS
c1\tcharter schools\tschools.charter = 'Y'\tplain
c2\trate above the average\trate > (SELECT AVG(rate) FROM satscores)\tsubquery
STEPS
s1\tjoin schools to satscores on cdscode = cds\t-\t-
s2\tkeep charter schools\ts1\tc1
s3\tcompute the average excellence rate over all schools\t-\t-
s4\tkeep schools whose rate exceeds the average\ts2,s3\tc2
OUTPUT
column\tschools.sname
```";

pub const EXCELLENCE_SQL: &str = "SELECT T1.sname FROM schools AS T1 INNER JOIN satscores AS T2 ON T1.cdscode = T2.cds \
WHERE T1.charter = 'Y' AND CAST(T2.numge1500 AS REAL) / T2.numtsttakr > \
(SELECT AVG(CAST(numge1500 AS REAL) / numtsttakr) FROM satscores)";

/// One scripted benchmark task and the replies each backend gives for it.
#[derive(Debug, Clone)]
pub struct ScriptedTask {
    pub question_id: u32,
    pub question: &'static str,
    pub evidence: &'static str,
    pub gold_sql: &'static str,
    pub plan: &'static str,
    pub primary_sql: &'static str,
    pub fallback_sql: &'static [&'static str],
}

pub fn benchmark_tasks() -> Vec<ScriptedTask> {
    vec![
        ScriptedTask {
            question_id: 0,
            question: EXCELLENCE_QUESTION,
            evidence: "charter schools refers to charter = 'Y'; excellence rate = numge1500 / numtsttakr",
            gold_sql: EXCELLENCE_SQL,
            plan: EXCELLENCE_PLAN,
            primary_sql: "```sql\nSELECT s.sname FROM schools s JOIN satscores t ON s.cdscode = t.cds WHERE s.charter = 'Y' \
AND t.numge1500 * 1.0 / t.numtsttakr > (SELECT AVG(numge1500 * 1.0 / numtsttakr) FROM satscores)\n```",
            fallback_sql: &[],
        },
        ScriptedTask {
            question_id: 1,
            question: "How many charter schools are there?",
            evidence: "charter schools refers to charter = 'Y'",
            gold_sql: "SELECT COUNT(*) FROM schools WHERE charter = 'Y'",
            plan: "```plan\nENTITIES\ncharter schools\tschools.charter\nCONDITIONS\nc1\tcharter schools\tcharter = 'Y'\tplain\nSTEPS\ns1\tcount charter schools\t-\tc1\nOUTPUT\ncolumn\tCOUNT(*)\n```",
            primary_sql: "SELECT COUNT(cdscode) FROM schools WHERE charter = 'y'",
            fallback_sql: &[],
        },
        ScriptedTask {
            question_id: 2,
            question: "Which school has the most SAT test takers?",
            evidence: "",
            gold_sql: "SELECT T1.sname FROM schools AS T1 JOIN satscores AS T2 ON T1.cdscode = T2.cds ORDER BY T2.numtsttakr DESC LIMIT 1",
            plan: "```plan\nENTITIES\nschool\tschools.sname\ntest takers\tsatscores.numtsttakr\nCONDITIONS\nSTEPS\ns1\tjoin schools to satscores\t-\t-\ns2\ttake the school with the largest numtsttakr\ts1\t-\nOUTPUT\ncolumn\tschools.sname\norder\tsatscores.numtsttakr DESC\nlimit\t1\n```",
            primary_sql: "SELECT sname FROM schools WHERE cdscode = (SELECT cds FROM satscores ORDER BY numtsttakr DESC LIMIT 1)",
            fallback_sql: &[],
        },
        ScriptedTask {
            question_id: 3,
            question: "Name the schools where at least 60 students scored 1500 or more on the SAT.",
            evidence: "",
            gold_sql: "SELECT sname FROM schools JOIN satscores ON cdscode = cds WHERE numge1500 >= 60",
            plan: "```plan\nENTITIES\nschools\tschools.sname\nstudents scoring 1500 or more\tsatscores.numge1500\nCONDITIONS\nc1\tat least 60\tnumge1500 >= 60\tplain\nSTEPS\ns1\tjoin schools to satscores\t-\t-\ns2\tfilter on numge1500\ts1\tc1\nOUTPUT\ncolumn\tschools.sname\n```",
            primary_sql: "SELECT nme FROM schools JOIN satscores ON cdscode = cds WHERE numge1500 >= 60",
            fallback_sql: &["```sql\nSELECT s.sname FROM schools s JOIN satscores t ON s.cdscode = t.cds WHERE t.numge1500 >= 60\n```"],
        },
        ScriptedTask {
            question_id: 4,
            question: "What is the average number of SAT test takers at non-charter schools?",
            evidence: "non-charter schools refers to charter = 'N'",
            gold_sql: "SELECT AVG(T2.numtsttakr) FROM schools AS T1 JOIN satscores AS T2 ON T1.cdscode = T2.cds WHERE T1.charter = 'N'",
            plan: "```plan\nENTITIES\nnon-charter schools\tschools.charter\ntest takers\tsatscores.numtsttakr\nCONDITIONS\nc1\tnon-charter\tcharter = 'N'\tplain\nSTEPS\ns1\tjoin schools to satscores\t-\t-\ns2\taverage numtsttakr over non-charter schools\ts1\tc1\nOUTPUT\ncolumn\tAVG(satscores.numtsttakr)\n```",
            primary_sql: "SELECT AVG(test_takers) FROM satscores",
            fallback_sql: &[
                "SELECT AVG(takers) FROM satscores",
                "SELECT AVG(numtesttakers) FROM satscores JOIN schools ON cds = cdscode",
                "SELECT AVG(satscores.takers) FROM satscores",
            ],
        },
    ]
}

/// Scripted backends for the benchmark fixture: local decomposer and primary,
/// GPT-4o-priced fallback, and the hash embedder.
pub fn benchmark_backends() -> Backends {
    let tasks = benchmark_tasks();
    let one = |s: &str| vec![ScriptedReply::from(s)];
    Backends {
        decomposer: scripted_sequence_backend("local-decomposer", Role::Decomposer, tasks.iter().map(|t| (t.question, one(t.plan)))),
        primary: scripted_sequence_backend("local-slm", Role::PrimaryGenerator, tasks.iter().map(|t| (t.question, one(t.primary_sql)))),
        fallback: scripted_sequence_backend(
            "remote-llm",
            Role::FallbackGenerator,
            tasks
                .iter()
                .filter(|t| !t.fallback_sql.is_empty())
                .map(|t| (t.question, t.fallback_sql.iter().map(|s| ScriptedReply::from(*s)).collect())),
        )
        .with_pricing(Pricing::GPT_4O),
        embedder: BackendSpec::hash_embedder("hash-embedder", DEFAULT_EMBEDDING_DIM),
    }
}

#[derive(Serialize)]
struct BirdRecord<'a> {
    question_id: u32,
    db_id: &'a str,
    question: &'a str,
    evidence: &'a str,
    #[serde(rename = "SQL")]
    sql: &'a str,
}

/// Paths of a workspace written by [`write_workspace`].
#[derive(Debug, Clone)]
pub struct FixtureWorkspace {
    pub root: PathBuf,
    pub databases_root: PathBuf,
    pub db_path: PathBuf,
    pub tasks_path: PathBuf,
    pub config_path: PathBuf,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

/// Write the database, docs, evidence, BIRD tasks, scripted fixture files and
/// a config that binds all four roles to them.
pub fn write_workspace(root: &Path) -> io::Result<FixtureWorkspace> {
    let databases_root = root.join("databases");
    let db_dir = databases_root.join(SCHOOLS_DB_ID);
    fs::create_dir_all(&db_dir)?;
    let db_path = db_dir.join(format!("{SCHOOLS_DB_ID}.sqlite"));
    create_schools_db(&db_path).map_err(io::Error::other)?;
    write_jsonl(&db_dir.join(format!("{SCHOOLS_DB_ID}.docs.jsonl")), &schools_docs())?;
    write_jsonl(&db_dir.join(format!("{SCHOOLS_DB_ID}.evidence.jsonl")), &schools_evidence().entries)?;

    let tasks = benchmark_tasks();
    let records: Vec<BirdRecord> = tasks
        .iter()
        .map(|t| BirdRecord {
            question_id: t.question_id,
            db_id: SCHOOLS_DB_ID,
            question: t.question,
            evidence: t.evidence,
            sql: t.gold_sql,
        })
        .collect();
    let tasks_path = root.join("tasks.json");
    fs::write(&tasks_path, serde_json::to_string_pretty(&records).map_err(io::Error::other)?)?;

    let fixture_file = |name: &str, pairs: Vec<(&str, Vec<&str>)>| -> io::Result<PathBuf> {
        let map: serde_json::Map<String, serde_json::Value> = pairs
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::from(v)))
            .collect();
        let path = root.join(name);
        fs::write(&path, serde_json::to_string_pretty(&map).map_err(io::Error::other)?)?;
        Ok(path)
    };
    let decomposer = fixture_file("decomposer.json", tasks.iter().map(|t| (t.question, vec![t.plan])).collect())?;
    let primary = fixture_file("primary.json", tasks.iter().map(|t| (t.question, vec![t.primary_sql])).collect())?;
    let fallback = fixture_file(
        "fallback.json",
        tasks
            .iter()
            .filter(|t| !t.fallback_sql.is_empty())
            .map(|t| (t.question, t.fallback_sql.to_vec()))
            .collect(),
    )?;

    let config = format!(
        r#"databases_root = {root:?}

[backends.decomposer]
name = "local-decomposer"
kind = "scripted"
fixtures = {decomposer:?}

[backends.primary_generator]
name = "local-slm"
kind = "scripted"
fixtures = {primary:?}

[backends.fallback_generator]
name = "remote-llm"
kind = "scripted"
fixtures = {fallback:?}
pricing = {{ input_per_million = 2.5, output_per_million = 10.0 }}

[backends.embedder]
name = "hash-embedder"
kind = "hash"
dim = {DEFAULT_EMBEDDING_DIM}

[eval]
trials = 3
workers = 2
"#,
        root = databases_root.display().to_string(),
        decomposer = decomposer.display().to_string(),
        primary = primary.display().to_string(),
        fallback = fallback.display().to_string(),
    );
    let config_path = root.join("nlsql.toml");
    fs::write(&config_path, config)?;

    Ok(FixtureWorkspace {
        root: root.to_path_buf(),
        databases_root,
        db_path,
        tasks_path,
        config_path,
    })
}

/// A request captured by [`MockServer`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: serde_json::Value,
}

/// Minimal HTTP/1.1 server on localhost that answers every request with the
/// next canned `(status, body)` pair, repeating the last one.
pub struct MockServer {
    pub url: String,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
}

impl MockServer {
    pub fn spawn(responses: Vec<(u16, String)>) -> io::Result<Self> {
        assert!(!responses.is_empty(), "mock server needs at least one response");
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let url = format!("http://{}/v1", listener.local_addr()?);
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { continue };
                let (status, body) = &responses[i.min(responses.len() - 1)];
                if let Ok(req) = serve_one(stream, *status, body) {
                    log.lock().unwrap_or_else(|p| p.into_inner()).push(req);
                }
            }
        });
        Ok(MockServer { url, requests })
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

/// Body of an OpenAI-style chat completion.
pub fn chat_response(content: &str, prompt_tokens: u64, completion_tokens: u64) -> String {
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    })
    .to_string()
}

fn serve_one(stream: TcpStream, status: u16, body: &str) -> io::Result<RecordedRequest> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
    let mut length = 0usize;
    let mut authorization = None;
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => length = value.trim().parse().unwrap_or(0),
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut raw = vec![0u8; length];
    reader.read_exact(&mut raw)?;
    let mut stream = reader.into_inner();
    write!(
        stream,
        "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()?;
    Ok(RecordedRequest {
        path,
        authorization,
        body: serde_json::from_slice(&raw).unwrap_or(serde_json::Value::Null),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposer::{check_bindings, parse_plan};
    use crate::extractor::introspect_schema;

    #[test]
    fn fixture_plans_bind_to_catalog() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.sqlite");
        create_schools_db(&path).unwrap();
        let cat = introspect_schema(&path).unwrap();
        for t in benchmark_tasks() {
            let plan = parse_plan(t.plan).unwrap_or_else(|e| panic!("task {}: {e}", t.question_id));
            check_bindings(&plan, &cat, t.plan).unwrap();
        }
    }

    #[test]
    fn question_keys_do_not_overlap() {
        let tasks = benchmark_tasks();
        for a in &tasks {
            for b in &tasks {
                if a.question_id != b.question_id {
                    assert!(!a.question.contains(b.question));
                }
            }
            for d in schools_docs() {
                assert!(!d.text.contains(a.question));
            }
        }
    }
}
