// Read a function document and look at what the model gives you.

use std::collections::BTreeSet;

use vulmatch::binmodel::{load_function, map_lines_to_instructions, SourceLine};

const DOC: &str = r#"{
  "schema": "vulmatch-func/1",
  "binary_id": "libfoo-1.2",
  "name": "parse_header",
  "entry": "1",
  "blocks": [
    {"id": "1", "successors": ["2", "3"], "insns": [
      {"addr": "0x401000", "text": "push rbp"},
      {"addr": "0x401001", "text": "mov rbp, rsp"},
      {"addr": "0x401004", "text": "cmp edi, 0x10"},
      {"addr": "0x401007", "text": "ja 0x401020"}]},
    {"id": "2", "successors": ["3"], "insns": [
      {"addr": "0x401009", "text": "lea rax, [rip + 0x2ff1]"},
      {"addr": "0x401010", "text": "call 0x401200"}]},
    {"id": "3", "successors": [], "insns": [
      {"addr": "0x401020", "text": "pop rbp"},
      {"addr": "0x401021", "text": "ret"}]}
  ],
  "line_map": [
    {"addr": "0x401004", "file": "src/header.c", "line": 41},
    {"addr": "0x401007", "file": "src/header.c", "line": 41},
    {"addr": "0x401009", "file": "src/header.c", "line": 42},
    {"addr": "0x401010", "file": "src/header.c", "line": 42}
  ]
}"#;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let f = load_function(DOC)?;
    for b in f.blocks() {
        let succ: Vec<String> = f.successors(&b.id).iter().map(|s| s.to_string()).collect();
        println!("block {} -> [{}]", b.id, succ.join(", "));
        for i in &b.instructions {
            println!("  {:#x}  {:<28} {}", i.address, i.raw_text, i.normalized());
        }
    }

    // absolute paths in the query still match the relative label
    let lines: BTreeSet<SourceLine> = [SourceLine::new("/build/libfoo/src/header.c", 42)].into();
    for (block, insns) in map_lines_to_instructions(&f, &lines) {
        println!("line 42 -> block {block}: {} instruction(s)", insns.len());
    }

    let broken = DOC.replace("\"successors\": [\"3\"]", "\"successors\": [\"9\"]");
    match load_function(&broken) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => return Err("dangling successor accepted".into()),
    }
    Ok(())
}

fn main() {
    run_example().unwrap();
}
