use vulmatch::siggen::{find_add_batches, find_added_blocks, find_leading_blocks, generate_signatures};
use vulmatch::synth::{figure_scenario, motivating_scenario};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    // Where do the added blocks sit, and what leads into them?
    let fig = figure_scenario();
    let (_, sites) = fig.sites();
    let found = find_added_blocks(&fig.patched, &sites, &fig.source_file)?;
    for batch in find_add_batches(&fig.patched, &found.added) {
        let ids: Vec<String> = batch.block_ids.iter().map(|b| b.to_string()).collect();
        let lead: Vec<String> = find_leading_blocks(&fig.patched, &batch)?
            .iter()
            .map(|b| b.to_string())
            .collect();
        println!("batch {{{}}} entered from {}", ids.join(","), lead.join(", "));
    }

    let sc = motivating_scenario();
    let generated = generate_signatures(
        &sc.vulnerable,
        &sc.patched,
        &sc.old_src,
        &sc.new_src,
        &sc.source_file,
        "CVE-2019-5482",
    )?;
    for s in &generated.signatures {
        println!(
            "{} signature: {} structure(s), {} instruction(s), patch signature: {}",
            s.kind,
            s.structures.len(),
            s.total_instructions,
            s.patch_signature.is_some()
        );
    }
    println!("{}", serde_json::to_string_pretty(&generated.signatures[0])?);
    Ok(())
}

fn main() {
    run_example().unwrap();
}
