use vulmatch::sigdb::{CveRecord, SignatureDatabase};
use vulmatch::siggen::generate_signatures;
use vulmatch::synth::{kind_for, synth_pair};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut db = SignatureDatabase::new();
    for seed in 0..4 {
        let p = synth_pair(seed, kind_for(seed as usize));
        let g = generate_signatures(&p.vulnerable, &p.patched, &p.old_src, &p.new_src, &p.source_file, &p.cve_id)?;
        db.upsert_record(CveRecord::single(&p.cve_id, "synth", &p.source_file, &p.vulnerable.name, "1.0"));
        db.add_signatures(g.signatures)?;
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("sigdb.json");
    db.save(&path)?;
    let loaded = SignatureDatabase::load(&path)?;
    assert_eq!(loaded, db);

    for cve in loaded.cve_ids() {
        for s in loaded.query(Some(cve))? {
            println!("{cve} {} {} #{}: {} instructions", s.function_name, s.kind, s.ordinal, s.total_instructions);
        }
    }
    if let Err(e) = loaded.query(Some("CVE-1999-0001")) {
        println!("{e}");
    }
    Ok(())
}

fn main() {
    run_example().unwrap();
}
