// Rank a small corpus: the vulnerable build should come first, the
// patched build should be recognised as patched.

use vulmatch::matcher::{rank_functions, score_signature, MatchOptions, DEFAULT_PATCH_THRESHOLD};
use vulmatch::sigdb::{CveRecord, SignatureDatabase};
use vulmatch::siggen::generate_signatures;
use vulmatch::synth::{motivating_scenario, synth_function};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let sc = motivating_scenario();
    let g = generate_signatures(&sc.vulnerable, &sc.patched, &sc.old_src, &sc.new_src, &sc.source_file, "CVE-2019-5482")?;
    let mut db = SignatureDatabase::new();
    db.upsert_record(CveRecord::single("CVE-2019-5482", "curl", "lib/tftp.c", "tftp_connect", "7.65.3"));
    db.add_signatures(g.signatures)?;

    let r = score_signature(&db.signatures[0], &sc.patched, DEFAULT_PATCH_THRESHOLD);
    println!("add signature vs patched build: P={} sim={}", r.patched, r.sim);

    let mut corpus = vec![sc.vulnerable.clone(), sc.patched.renamed("tftp_connect", "curl-7.66.0")];
    corpus.extend((0..20).map(|i| synth_function(i, &format!("fn_{i:02}"), "curl-7.65.3")));

    let report = rank_functions(&db, &corpus, &MatchOptions::default())?;
    for ranking in &report.rankings {
        println!("{} / {}", ranking.cve_id, ranking.function_name);
        for e in ranking.entries.iter().take(5) {
            println!("  {:<14} {:<12} {:.3}{}", e.function, e.binary_id, e.score, if e.patched { "  patched" } else { "" });
        }
    }
    assert_eq!(report.rankings[0].entries[0].binary_id, "curl-7.65.3");
    assert_eq!(report.rankings[0].entries[0].score, 1.0);
    Ok(())
}

fn main() {
    run_example().unwrap();
}
