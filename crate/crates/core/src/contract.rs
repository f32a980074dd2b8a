//! Simulated public contract: hash commitments, deposit escrow, gas, breach
//! claims, and settlement.
//!
//! All currency is integer smallest units; [`UNITS_PER_COIN`] of them make
//! one currency unit. Gas is a fixed charge per commitment priced at
//! [`GAS_PRICE`] units per gas. The invariant
//! `sum(balance) + sum(deposit_held) + pool + burned == total_supply`
//! holds after every operation; `total_supply` only grows through explicit
//! funding.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::HashDigest;

pub const UNITS_PER_COIN: u64 = 1_000_000_000;
/// Smallest units per gas; 95,000 gas then costs 0.0019 coin.
pub const GAS_PRICE: u64 = 20;
pub const FIRST_COMMIT_GAS: u64 = 95_000;
pub const NEXT_COMMIT_GAS: u64 = 25_000;

/// Gas a worker has spent after `m` commitments.
pub const fn gas_for_commitments(m: u64) -> u64 {
    if m == 0 {
        0
    } else {
        FIRST_COMMIT_GAS + NEXT_COMMIT_GAS * (m - 1)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContractError {
    #[error("{0} has no private-chain identity")]
    UnknownIdentity(String),
    #[error("{0} is not registered")]
    NotRegistered(String),
    #[error("{0} is already registered")]
    AlreadyRegistered(String),
    #[error("amount must be positive")]
    ZeroAmount,
    #[error("{worker} needs {needed} units but holds {available}")]
    InsufficientBalance {
        worker: String,
        needed: u64,
        available: u64,
    },
    #[error("{worker} must commit epoch {expected} next, got {got}")]
    OutOfOrder {
        worker: String,
        expected: u64,
        got: u64,
    },
    #[error("a worker cannot accuse itself")]
    SelfAccusation,
    #[error("{0} holds no deposit")]
    NoDeposit(String),
    #[error("{0} is already party to an unsettled claim")]
    PartyBusy(String),
    #[error("epochs {first}..={last} are not all committed by {worker}")]
    EpochRange { worker: String, first: u64, last: u64 },
    #[error("unknown claim {0}")]
    UnknownClaim(u64),
    #[error("claim {0} is not awaiting this step")]
    WrongPhase(u64),
    #[error("claim {0} needs a detection verdict")]
    VerdictRequired(u64),
    #[error("claim {0} is already settled")]
    AlreadySettled(u64),
    #[error("claims are still pending")]
    PendingClaims,
    #[error("rewards were already paid")]
    RewardsPaid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowAccount {
    pub worker_id: String,
    pub public_address: String,
    pub balance: u64,
    pub deposit_held: u64,
    pub gas_spent: u64,
    pub registered: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashCommitment {
    pub worker_id: String,
    /// Dense per-worker index, 0 for the worker's first commitment.
    pub epoch_index: u64,
    /// Training round the commitment belongs to.
    pub round: u64,
    pub digest: HashDigest,
    pub tx_gas: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClaimStatus {
    Open,
    HashMismatchConfirmed,
    TrojanConfirmed,
    Dismissed,
    /// The private chain could not produce a digest; needs operator action.
    Suspended,
}

impl ClaimStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ClaimStatus::HashMismatchConfirmed | ClaimStatus::TrojanConfirmed | ClaimStatus::Dismissed
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClaimStatus::Open => "open",
            ClaimStatus::HashMismatchConfirmed => "hash-mismatch-confirmed",
            ClaimStatus::TrojanConfirmed => "trojan-confirmed",
            ClaimStatus::Dismissed => "dismissed",
            ClaimStatus::Suspended => "suspended",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClaimPhase {
    HashCheck,
    Detection,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreachClaim {
    pub claim_id: u64,
    pub accuser: String,
    pub accused: String,
    /// Inclusive range of the accused's dense epoch indices.
    pub epoch_range: (u64, u64),
    pub status: ClaimStatus,
    pub phase: ClaimPhase,
    pub verification_contract_id: String,
    pub settled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    TrojanConfirmed,
    Exonerated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub claim_id: u64,
    pub status: ClaimStatus,
    pub loser: String,
    pub forfeited: u64,
    pub shares: Vec<(String, u64)>,
    pub to_pool: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub base_reward: u64,
    pub speed_bonus: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub worker_id: String,
    pub rank: usize,
    pub deposit_returned: u64,
    pub reward: u64,
    /// The pool could not cover the full schedule and rewards were scaled down.
    pub scaled: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum ContractEvent {
    Fund {
        worker: String,
        amount: u64,
    },
    FundPool {
        amount: u64,
    },
    Register {
        worker: String,
        address: String,
        deposit: u64,
    },
    Commit {
        worker: String,
        epoch_index: u64,
        round: u64,
        digest: HashDigest,
        gas: u64,
        cost: u64,
    },
    ClaimOpened {
        claim_id: u64,
        accuser: String,
        accused: String,
        first_epoch: u64,
        last_epoch: u64,
        contract: String,
    },
    HashCheck {
        claim_id: u64,
        status: ClaimStatus,
        mismatched_epochs: Vec<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Settled(Settlement),
    Reward(RewardRecord),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    identities: BTreeSet<String>,
    accounts: BTreeMap<String, EscrowAccount>,
    commitments: BTreeMap<String, Vec<HashCommitment>>,
    claims: Vec<BreachClaim>,
    pool: u64,
    burned: u64,
    total_supply: u64,
    rewards_paid: bool,
    events: Vec<ContractEvent>,
}

impl Contract {
    /// A contract that accepts registrations from exactly `identities`.
    pub fn new<I: IntoIterator<Item = String>>(identities: I) -> Self {
        Self {
            identities: identities.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn account(&self, worker: &str) -> Option<&EscrowAccount> {
        self.accounts.get(worker)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &EscrowAccount> {
        self.accounts.values()
    }

    pub fn pool(&self) -> u64 {
        self.pool
    }

    pub fn burned(&self) -> u64 {
        self.burned
    }

    pub fn total_supply(&self) -> u64 {
        self.total_supply
    }

    pub fn events(&self) -> &[ContractEvent] {
        &self.events
    }

    pub fn claims(&self) -> &[BreachClaim] {
        &self.claims
    }

    pub fn claim(&self, id: u64) -> Result<&BreachClaim, ContractError> {
        self.claims
            .get(id as usize)
            .ok_or(ContractError::UnknownClaim(id))
    }

    pub fn commitments(&self, worker: &str) -> &[HashCommitment] {
        self.commitments.get(worker).map_or(&[], |c| c.as_slice())
    }

    pub fn commitment(&self, worker: &str, epoch_index: u64) -> Option<&HashCommitment> {
        self.commitments(worker).get(epoch_index as usize)
    }

    /// `sum(balance + held) + pool + burned == total_supply`.
    pub fn is_conserved(&self) -> bool {
        let held: u128 = self
            .accounts
            .values()
            .map(|a| u128::from(a.balance) + u128::from(a.deposit_held))
            .sum();
        held + u128::from(self.pool) + u128::from(self.burned) == u128::from(self.total_supply)
    }

    fn account_mut(&mut self, worker: &str) -> Result<&mut EscrowAccount, ContractError> {
        self.accounts
            .get_mut(worker)
            .ok_or_else(|| ContractError::NotRegistered(worker.to_string()))
    }

    /// Mints `amount` into a worker's wallet, opening it if needed.
    pub fn fund(&mut self, worker: &str, amount: u64) -> Result<(), ContractError> {
        if !self.identities.contains(worker) {
            return Err(ContractError::UnknownIdentity(worker.to_string()));
        }
        let acct = self
            .accounts
            .entry(worker.to_string())
            .or_insert_with(|| EscrowAccount {
                worker_id: worker.to_string(),
                public_address: String::new(),
                balance: 0,
                deposit_held: 0,
                gas_spent: 0,
                registered: false,
            });
        acct.balance += amount;
        self.total_supply += amount;
        self.events.push(ContractEvent::Fund {
            worker: worker.to_string(),
            amount,
        });
        Ok(())
    }

    pub fn fund_pool(&mut self, amount: u64) {
        self.pool += amount;
        self.total_supply += amount;
        self.events.push(ContractEvent::FundPool { amount });
    }

    pub fn register_and_deposit(
        &mut self,
        worker: &str,
        address: &str,
        amount: u64,
    ) -> Result<&EscrowAccount, ContractError> {
        if !self.identities.contains(worker) {
            return Err(ContractError::UnknownIdentity(worker.to_string()));
        }
        if amount == 0 {
            return Err(ContractError::ZeroAmount);
        }
        let acct = self
            .accounts
            .get_mut(worker)
            .ok_or_else(|| ContractError::InsufficientBalance {
                worker: worker.to_string(),
                needed: amount,
                available: 0,
            })?;
        if acct.registered {
            return Err(ContractError::AlreadyRegistered(worker.to_string()));
        }
        if acct.balance < amount {
            return Err(ContractError::InsufficientBalance {
                worker: worker.to_string(),
                needed: amount,
                available: acct.balance,
            });
        }
        acct.balance -= amount;
        acct.deposit_held = amount;
        acct.registered = true;
        acct.public_address = address.to_string();
        self.events.push(ContractEvent::Register {
            worker: worker.to_string(),
            address: address.to_string(),
            deposit: amount,
        });
        Ok(&self.accounts[worker])
    }

    pub fn commit_hash(
        &mut self,
        worker: &str,
        epoch_index: u64,
        round: u64,
        digest: HashDigest,
    ) -> Result<&HashCommitment, ContractError> {
        let made = self.commitments(worker).len() as u64;
        let acct = self.account_mut(worker)?;
        if !acct.registered {
            return Err(ContractError::NotRegistered(worker.to_string()));
        }
        if epoch_index != made {
            return Err(ContractError::OutOfOrder {
                worker: worker.to_string(),
                expected: made,
                got: epoch_index,
            });
        }
        let gas = if made == 0 { FIRST_COMMIT_GAS } else { NEXT_COMMIT_GAS };
        let cost = gas * GAS_PRICE;
        if acct.balance < cost {
            return Err(ContractError::InsufficientBalance {
                worker: worker.to_string(),
                needed: cost,
                available: acct.balance,
            });
        }
        acct.balance -= cost;
        acct.gas_spent += gas;
        self.burned += cost;
        self.events.push(ContractEvent::Commit {
            worker: worker.to_string(),
            epoch_index,
            round,
            digest: digest.clone(),
            gas,
            cost,
        });
        let list = self.commitments.entry(worker.to_string()).or_default();
        list.push(HashCommitment {
            worker_id: worker.to_string(),
            epoch_index,
            round,
            digest,
            tx_gas: gas,
        });
        Ok(list.last().expect("just pushed"))
    }

    fn busy(&self, worker: &str) -> bool {
        self.claims
            .iter()
            .any(|c| !c.settled && (c.accuser == worker || c.accused == worker))
    }

    /// Opens a claim over the accused's epochs `first..=last`.
    pub fn open_claim(
        &mut self,
        accuser: &str,
        accused: &str,
        first: u64,
        last: u64,
    ) -> Result<&BreachClaim, ContractError> {
        if accuser == accused {
            return Err(ContractError::SelfAccusation);
        }
        for w in [accuser, accused] {
            let a = self
                .accounts
                .get(w)
                .filter(|a| a.registered)
                .ok_or_else(|| ContractError::NotRegistered(w.to_string()))?;
            if a.deposit_held == 0 {
                return Err(ContractError::NoDeposit(w.to_string()));
            }
            if self.busy(w) {
                return Err(ContractError::PartyBusy(w.to_string()));
            }
        }
        if first > last || last >= self.commitments(accused).len() as u64 {
            return Err(ContractError::EpochRange {
                worker: accused.to_string(),
                first,
                last,
            });
        }
        let claim_id = self.claims.len() as u64;
        let contract = format!("vc-{claim_id:04}");
        self.claims.push(BreachClaim {
            claim_id,
            accuser: accuser.to_string(),
            accused: accused.to_string(),
            epoch_range: (first, last),
            status: ClaimStatus::Open,
            phase: ClaimPhase::HashCheck,
            verification_contract_id: contract.clone(),
            settled: false,
            detail: None,
        });
        self.events.push(ContractEvent::ClaimOpened {
            claim_id,
            accuser: accuser.to_string(),
            accused: accused.to_string(),
            first_epoch: first,
            last_epoch: last,
            contract,
        });
        Ok(&self.claims[claim_id as usize])
    }

    /// Compares every committed digest in the claim's range with the one
    /// `recompute(accused, epoch_index, round)` derives from the private
    /// chain. A mismatch confirms the breach; a clean sweep moves the claim
    /// to the detection phase; a recompute failure suspends it.
    pub fn adjudicate_hashes<F>(&mut self, claim_id: u64, mut recompute: F) -> Result<&BreachClaim, ContractError>
    where
        F: FnMut(&str, u64, u64) -> Result<HashDigest, String>,
    {
        let claim = self.claim(claim_id)?.clone();
        if claim.status != ClaimStatus::Open || claim.phase != ClaimPhase::HashCheck {
            return Err(ContractError::WrongPhase(claim_id));
        }
        let mut mismatched = Vec::new();
        let mut failure = None;
        for e in claim.epoch_range.0..=claim.epoch_range.1 {
            let c = self.commitment(&claim.accused, e).expect("range checked at open");
            match recompute(&claim.accused, e, c.round) {
                Ok(d) if d == c.digest => {}
                Ok(_) => mismatched.push(e),
                Err(detail) => {
                    failure = Some(format!("epoch {e}: {detail}"));
                    break;
                }
            }
        }
        let c = &mut self.claims[claim_id as usize];
        if let Some(detail) = failure {
            c.status = ClaimStatus::Suspended;
            c.detail = Some(detail);
        } else if !mismatched.is_empty() {
            c.status = ClaimStatus::HashMismatchConfirmed;
        } else {
            c.phase = ClaimPhase::Detection;
        }
        self.events.push(ContractEvent::HashCheck {
            claim_id,
            status: c.status,
            mismatched_epochs: mismatched,
            detail: c.detail.clone(),
        });
        Ok(&self.claims[claim_id as usize])
    }

    /// Closes a claim and redistributes the loser's deposit equally among
    /// every other registered worker; the indivisible remainder goes to the
    /// pool. A hash-mismatch claim needs no verdict; a claim in the detection
    /// phase does.
    pub fn settle(&mut self, claim_id: u64, verdict: Option<Verdict>) -> Result<Settlement, ContractError> {
        let claim = self.claim(claim_id)?.clone();
        if claim.settled {
            return Err(ContractError::AlreadySettled(claim_id));
        }
        let status = match (claim.status, claim.phase, verdict) {
            (ClaimStatus::HashMismatchConfirmed, _, _) => ClaimStatus::HashMismatchConfirmed,
            (ClaimStatus::Open, ClaimPhase::Detection, Some(Verdict::TrojanConfirmed)) => {
                ClaimStatus::TrojanConfirmed
            }
            (ClaimStatus::Open, ClaimPhase::Detection, Some(Verdict::Exonerated)) => ClaimStatus::Dismissed,
            (ClaimStatus::Open, ClaimPhase::Detection, None) => {
                return Err(ContractError::VerdictRequired(claim_id))
            }
            _ => return Err(ContractError::WrongPhase(claim_id)),
        };
        let loser = if status == ClaimStatus::Dismissed {
            claim.accuser.clone()
        } else {
            claim.accused.clone()
        };
        let forfeited = std::mem::take(&mut self.account_mut(&loser)?.deposit_held);
        let others: Vec<String> = self
            .accounts
            .values()
            .filter(|a| a.registered && a.worker_id != loser)
            .map(|a| a.worker_id.clone())
            .collect();
        let (share, to_pool) = if others.is_empty() {
            (0, forfeited)
        } else {
            let n = others.len() as u64;
            (forfeited / n, forfeited % n)
        };
        let mut shares = Vec::new();
        for w in others {
            self.account_mut(&w)?.balance += share;
            shares.push((w, share));
        }
        self.pool += to_pool;
        let c = &mut self.claims[claim_id as usize];
        c.status = status;
        c.settled = true;
        let s = Settlement {
            claim_id,
            status,
            loser,
            forfeited,
            shares,
            to_pool,
        };
        self.events.push(ContractEvent::Settled(s.clone()));
        Ok(s)
    }

    /// Returns deposits to clean workers and pays
    /// `base + bonus * (K - 1 - rank) / (K - 1)` from the pool, where rank 0
    /// is the lowest latency among the K clean workers. Workers without a
    /// latency rank after all others; ties break by worker id.
    pub fn pay_rewards(
        &mut self,
        latency: &BTreeMap<String, f64>,
        cfg: RewardConfig,
    ) -> Result<Vec<RewardRecord>, ContractError> {
        if self.rewards_paid {
            return Err(ContractError::RewardsPaid);
        }
        if self.claims.iter().any(|c| !c.settled) {
            return Err(ContractError::PendingClaims);
        }
        let mut clean: Vec<(f64, String)> = self
            .accounts
            .values()
            .filter(|a| a.registered && a.deposit_held > 0)
            .map(|a| {
                let l = latency.get(&a.worker_id).copied().unwrap_or(f64::INFINITY);
                (l, a.worker_id.clone())
            })
            .collect();
        clean.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let k = clean.len() as u128;
        let owed: Vec<u128> = (0..clean.len() as u128)
            .map(|rank| {
                let bonus = if k <= 1 {
                    u128::from(cfg.speed_bonus)
                } else {
                    u128::from(cfg.speed_bonus) * (k - 1 - rank) / (k - 1)
                };
                u128::from(cfg.base_reward) + bonus
            })
            .collect();
        let total: u128 = owed.iter().sum();
        let pool = u128::from(self.pool);
        let scaled = total > pool;
        let mut out = Vec::new();
        for (rank, ((_, w), due)) in clean.into_iter().zip(owed).enumerate() {
            let reward = if scaled { due * pool / total } else { due } as u64;
            self.pool -= reward;
            let acct = self.account_mut(&w)?;
            let deposit = std::mem::take(&mut acct.deposit_held);
            acct.balance += deposit + reward;
            let rec = RewardRecord {
                worker_id: w,
                rank,
                deposit_returned: deposit,
                reward,
                scaled,
            };
            self.events.push(ContractEvent::Reward(rec.clone()));
            out.push(rec);
        }
        self.rewards_paid = true;
        Ok(out)
    }

    pub fn write_events<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::hash_bytes;
    use proptest::prelude::*;

    const COIN: u64 = UNITS_PER_COIN;

    fn contract(workers: &[&str], balance: u64, deposit: u64) -> Contract {
        let mut c = Contract::new(workers.iter().map(|w| w.to_string()));
        for w in workers {
            c.fund(w, balance).unwrap();
            c.register_and_deposit(w, &format!("0x{w}"), deposit).unwrap();
        }
        c
    }

    #[test]
    fn reference_gas_prices() {
        assert_eq!(FIRST_COMMIT_GAS * GAS_PRICE, 1_900_000); // 0.0019 coin
        assert_eq!(NEXT_COMMIT_GAS * GAS_PRICE, 500_000); // 0.0005 coin
        assert_eq!(1_900_000 * 10_000 / COIN, 19);
        assert_eq!(500_000 * 10_000 / COIN, 5);
    }

    #[test]
    fn deposit_moves_balance_to_escrow() {
        let c = contract(&["a"], 10 * COIN, COIN);
        let a = c.account("a").unwrap();
        assert_eq!((a.balance, a.deposit_held), (9 * COIN, COIN));
        assert!(c.is_conserved());
    }

    #[test]
    fn registration_errors() {
        let mut c = Contract::new(["a".to_string(), "b".to_string()]);
        c.fund("a", 5).unwrap();
        assert_eq!(c.register_and_deposit("a", "x", 0).unwrap_err(), ContractError::ZeroAmount);
        assert!(matches!(
            c.register_and_deposit("a", "x", 6),
            Err(ContractError::InsufficientBalance { .. })
        ));
        assert!(matches!(c.fund("zed", 5), Err(ContractError::UnknownIdentity(_))));
        assert!(matches!(c.register_and_deposit("zed", "x", 1), Err(ContractError::UnknownIdentity(_))));
        c.register_and_deposit("a", "x", 1).unwrap();
        assert!(matches!(c.register_and_deposit("a", "x", 1), Err(ContractError::AlreadyRegistered(_))));
    }

    #[test]
    fn gas_schedule_and_dense_epochs() {
        let mut c = contract(&["a"], 10 * COIN, COIN);
        let d = hash_bytes(b"x");
        c.commit_hash("a", 0, 0, d.clone()).unwrap();
        assert_eq!(c.account("a").unwrap().gas_spent, 95_000);
        c.commit_hash("a", 1, 1, d.clone()).unwrap();
        assert_eq!(c.account("a").unwrap().gas_spent, 120_000);
        assert!(matches!(c.commit_hash("a", 3, 3, d.clone()), Err(ContractError::OutOfOrder { .. })));
        assert_eq!(c.commitment("a", 1).unwrap().round, 1);
        assert!(c.is_conserved());
    }

    #[test]
    fn commit_without_gas_money_is_rejected() {
        let mut c = contract(&["a"], COIN + 1_000_000, COIN);
        assert!(matches!(
            c.commit_hash("a", 0, 0, hash_bytes(b"")),
            Err(ContractError::InsufficientBalance { .. })
        ));
        assert!(c.commitments("a").is_empty());
    }

    fn committed(workers: &[&str], epochs: u64) -> Contract {
        let mut c = contract(workers, 10 * COIN, COIN);
        for w in workers {
            for e in 0..epochs {
                c.commit_hash(w, e, e, hash_bytes(format!("{w}{e}").as_bytes())).unwrap();
            }
        }
        c
    }

    #[test]
    fn claim_preconditions() {
        let mut c = committed(&["a", "b", "c"], 2);
        assert_eq!(c.open_claim("a", "a", 0, 1).unwrap_err(), ContractError::SelfAccusation);
        assert!(matches!(c.open_claim("a", "b", 0, 2), Err(ContractError::EpochRange { .. })));
        let id = c.open_claim("a", "b", 0, 1).unwrap().claim_id;
        assert_eq!(c.claim(id).unwrap().verification_contract_id, "vc-0000");
        assert_eq!(c.claim(id).unwrap().status, ClaimStatus::Open);
        assert!(matches!(c.open_claim("c", "b", 0, 1), Err(ContractError::PartyBusy(_))));
    }

    #[test]
    fn four_workers_split_a_confirmed_deposit() {
        let mut c = committed(&["a", "b", "c", "d"], 1);
        let id = c.open_claim("a", "b", 0, 0).unwrap().claim_id;
        c.adjudicate_hashes(id, |_, _, _| Ok(hash_bytes(b"tampered"))).unwrap();
        assert_eq!(c.claim(id).unwrap().status, ClaimStatus::HashMismatchConfirmed);
        let before: BTreeMap<_, _> = c.accounts().map(|a| (a.worker_id.clone(), a.balance)).collect();
        let s = c.settle(id, None).unwrap();
        assert_eq!(s.loser, "b");
        assert_eq!(s.forfeited, COIN);
        // 1e9 / 3 = 333_333_333 remainder 1
        assert_eq!(s.to_pool, 1);
        for w in ["a", "c", "d"] {
            assert_eq!(c.account(w).unwrap().balance, before[w] + 333_333_333);
        }
        assert_eq!(c.account("b").unwrap().deposit_held, 0);
        assert!(c.is_conserved());
        assert_eq!(c.settle(id, None).unwrap_err(), ContractError::AlreadySettled(id));
    }

    #[test]
    fn honest_accused_goes_to_detection_then_dismissal() {
        let mut c = committed(&["a", "b", "c"], 2);
        let id = c.open_claim("a", "b", 0, 1).unwrap().claim_id;
        let digests: Vec<_> = c.commitments("b").iter().map(|x| x.digest.clone()).collect();
        c.adjudicate_hashes(id, |_, e, _| Ok(digests[e as usize].clone())).unwrap();
        assert_eq!(c.claim(id).unwrap().phase, ClaimPhase::Detection);
        assert_eq!(c.settle(id, None).unwrap_err(), ContractError::VerdictRequired(id));
        let s = c.settle(id, Some(Verdict::Exonerated)).unwrap();
        assert_eq!(s.status, ClaimStatus::Dismissed);
        assert_eq!(s.loser, "a");
        // accused is among the beneficiaries
        assert!(s.shares.iter().any(|(w, amt)| w == "b" && *amt == COIN / 2));
        assert!(c.is_conserved());
    }

    #[test]
    fn recompute_failure_suspends() {
        let mut c = committed(&["a", "b"], 1);
        let id = c.open_claim("a", "b", 0, 0).unwrap().claim_id;
        c.adjudicate_hashes(id, |_, _, _| Err("missing shard".into())).unwrap();
        assert_eq!(c.claim(id).unwrap().status, ClaimStatus::Suspended);
        assert!(c.settle(id, Some(Verdict::TrojanConfirmed)).is_err());
    }

    #[test]
    fn rewards_follow_rank_and_skip_losers() {
        let mut c = committed(&["a", "b", "c", "d"], 1);
        c.fund_pool(100);
        let id = c.open_claim("a", "d", 0, 0).unwrap().claim_id;
        c.adjudicate_hashes(id, |_, _, _| Ok(hash_bytes(b"other"))).unwrap();
        c.settle(id, None).unwrap();
        let lat = BTreeMap::from([("a".into(), 3.0), ("b".into(), 1.0), ("c".into(), 2.0), ("d".into(), 0.0)]);
        let recs = c
            .pay_rewards(&lat, RewardConfig { base_reward: 10, speed_bonus: 20 })
            .unwrap();
        let by: BTreeMap<_, _> = recs.iter().map(|r| (r.worker_id.as_str(), r)).collect();
        assert!(!by.contains_key("d"));
        assert_eq!(by["b"].reward, 30);
        assert_eq!(by["c"].reward, 20);
        assert_eq!(by["a"].reward, 10);
        assert!(recs.iter().all(|r| r.deposit_returned == COIN && !r.scaled));
        assert!(c.is_conserved());
        assert_eq!(c.pay_rewards(&lat, RewardConfig { base_reward: 0, speed_bonus: 0 }).unwrap_err(), ContractError::RewardsPaid);
    }

    #[test]
    fn short_pool_scales_rewards() {
        let mut c = committed(&["a", "b"], 1);
        c.fund_pool(10);
        let recs = c
            .pay_rewards(&BTreeMap::new(), RewardConfig { base_reward: 10, speed_bonus: 10 })
            .unwrap();
        assert!(recs.iter().all(|r| r.scaled));
        assert!(recs.iter().map(|r| r.reward).sum::<u64>() <= 10);
        assert!(c.is_conserved());
    }

    #[derive(Clone, Debug)]
    enum Op {
        Commit(usize),
        Open(usize, usize),
        Check(usize, bool),
        Settle(usize, Option<bool>),
        Pay,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0..5usize).prop_map(Op::Commit),
            (0..5usize, 0..5usize).prop_map(|(a, b)| Op::Open(a, b)),
            (0..4usize, any::<bool>()).prop_map(|(c, m)| Op::Check(c, m)),
            (0..4usize, prop::option::of(any::<bool>())).prop_map(|(c, v)| Op::Settle(c, v)),
            Just(Op::Pay),
        ]
    }

    proptest! {
        #[test]
        fn random_sequences_conserve_currency(ops in prop::collection::vec(op(), 1..40)) {
            let ws = ["w0", "w1", "w2", "w3", "w4"];
            let mut c = contract(&ws, 2 * COIN, COIN / 3);
            c.fund_pool(7);
            for o in ops {
                let _ = match o {
                    Op::Commit(w) => {
                        let e = c.commitments(ws[w]).len() as u64;
                        c.commit_hash(ws[w], e, e, hash_bytes(&[w as u8])).map(|_| ())
                    }
                    Op::Open(a, b) => c.open_claim(ws[a], ws[b], 0, 0).map(|_| ()),
                    Op::Check(id, mismatch) => c
                        .adjudicate_hashes(id as u64, |w, _, _| {
                            let honest = hash_bytes(&[ws.iter().position(|x| *x == w).unwrap() as u8]);
                            Ok(if mismatch { hash_bytes(b"?") } else { honest })
                        })
                        .map(|_| ()),
                    Op::Settle(id, v) => c
                        .settle(id as u64, v.map(|t| if t { Verdict::TrojanConfirmed } else { Verdict::Exonerated }))
                        .map(|s| {
                            // exactly one party forfeits, and it had something to lose
                            assert!(s.forfeited > 0);
                            assert!(s.shares.iter().all(|(w, _)| *w != s.loser));
                        }),
                    Op::Pay => c.pay_rewards(&BTreeMap::new(), RewardConfig { base_reward: 2, speed_bonus: 3 }).map(|_| ()),
                };
                prop_assert!(c.is_conserved());
                for a in c.accounts() {
                    prop_assert_eq!(a.gas_spent, gas_for_commitments(c.commitments(&a.worker_id).len() as u64));
                }
            }
            for cl in c.claims().iter().filter(|cl| cl.settled) {
                let forfeits = c.events().iter().filter(|e| matches!(e, ContractEvent::Settled(s) if s.claim_id == cl.claim_id)).count();
                prop_assert_eq!(forfeits, 1);
                prop_assert!(cl.status.is_terminal());
            }
        }
    }
}
