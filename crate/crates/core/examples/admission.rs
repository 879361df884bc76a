//! GPU-first admission with reserve-ahead KV accounting.
//!
//! cargo run --example admission

use hybrid_serve_sim::memory::KvAccount;
use hybrid_serve_sim::workload::Request;

fn main() {
    // capacities in KV tokens
    let mut account = KvAccount::new(1000, 600);
    let requests = [
        Request::new(0, 0.0, 300, 100),
        Request::new(1, 0.0, 300, 100),
        Request::new(2, 0.0, 100, 50),
        Request::new(3, 0.0, 200, 200),
        Request::new(4, 0.0, 1500, 10),
        Request::new(5, 0.0, 300, 100),
        Request::new(6, 0.0, 10, 10),
    ];
    let refs: Vec<&Request> = requests.iter().collect();
    let round = account.admit(&refs);
    for p in &round.placed {
        println!("{} -> {:?}", p.request_id, p.device);
    }
    for r in &round.rejected {
        println!("{} rejected: needs {} tokens", r.request_id, r.needed_tokens);
    }
    // request 3 ends the GPU prefix; request 5 fits nowhere and holds back
    // request 6 even though 6 is small
    println!("still queued: {:?}", round.queued);
    println!(
        "gpu {}/{}  cpu {}/{}",
        account.gpu_used_tokens(),
        account.gpu_capacity_tokens(),
        account.cpu_used_tokens(),
        account.cpu_capacity_tokens()
    );

    account.release(round.placed[0].request_id).unwrap();
    let waiting: Vec<&Request> = round.queued.iter().map(|id| &requests[id.0 as usize]).collect();
    let next = account.admit(&waiting);
    println!("after one completion: {:?}", next.placed);
}
