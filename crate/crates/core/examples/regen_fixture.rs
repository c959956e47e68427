//! Rewrites `fixtures/mock_fixture.json` from the seeded generator.

use promptsmith::gateway::mock::{MockFixture, DEFAULT_MOCK_SEED};

fn main() -> promptsmith::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/mock_fixture.json");
    MockFixture::generate(DEFAULT_MOCK_SEED).save(path)?;
    println!("wrote {path}");
    Ok(())
}
