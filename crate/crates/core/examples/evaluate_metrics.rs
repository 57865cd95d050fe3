use vulmatch::evalharness::{evaluate, CorpusBinary, EvalCase};
use vulmatch::sigdb::{CveRecord, SignatureDatabase};
use vulmatch::siggen::generate_signatures;
use vulmatch::synth::{kind_for, synth_function, synth_pair};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut db = SignatureDatabase::new();
    let mut cases = Vec::new();
    for seed in 0..8u64 {
        let p = synth_pair(seed, kind_for(seed as usize));
        let g = generate_signatures(&p.vulnerable, &p.patched, &p.old_src, &p.new_src, &p.source_file, &p.cve_id)?;
        db.upsert_record(CveRecord::single(&p.cve_id, "synth", &p.source_file, &p.vulnerable.name, "1.0"));
        db.add_signatures(g.signatures)?;

        let mut bv: Vec<_> = (0..10).map(|i| synth_function(seed * 100 + i, &format!("v{i}"), "B_v")).collect();
        bv.push(p.vulnerable.renamed(p.vulnerable.name.clone(), "B_v"));
        let mut bp: Vec<_> = (0..10).map(|i| synth_function(seed * 100 + i, &format!("v{i}"), "B_p")).collect();
        bp.push(p.patched.renamed(p.vulnerable.name.clone(), "B_p"));
        cases.push(EvalCase {
            id: format!("case-{seed}"),
            cve_id: p.cve_id.clone(),
            ground_truth_function: p.vulnerable.name.clone(),
            corpus: vec![
                CorpusBinary { label: "B_v".into(), functions: bv },
                CorpusBinary { label: "B_p".into(), functions: bp },
            ],
            expected_vulnerable_binary: "B_v".into(),
        });
    }

    for alpha in [0.1, 0.2, 0.3, 0.4] {
        let m = evaluate(&cases, &db, alpha, 0.8)?;
        println!("alpha={alpha}: top1={:.3} mismatch={:.3}", m.top1, m.mismatch);
    }
    let m = evaluate(&cases, &db, 0.1, 0.8)?;
    for c in &m.per_case {
        let runner_up = c.ranked.get(1).map_or(0.0, |r| r.score);
        println!("{} S_GV={:.3} next={:.3} top1={}", c.case_id, c.s_gv, runner_up, c.top1);
    }
    Ok(())
}

fn main() {
    run_example().unwrap();
}
