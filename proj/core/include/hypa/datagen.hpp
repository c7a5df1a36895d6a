#pragma once

#include "hypa/common.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace hypa {

// Token-id layout of the synthetic vocabulary. The usable range
// [0, vocab_size - 2) is partitioned into task / confounder / noise groups;
// the last two ids are reserved class tokens and never appear inside example
// sequences. Task and confounder groups are split in half per label value,
// lower half for label 0.
struct GenParams {
  int seq_len = 32;
  int vocab_size = 64;
  int n_task_tokens = 8;   // split 4/4 between y=0 and y=1
  int n_conf_tokens = 8;   // split 4/4 between z=0 and z=1
  int n_noise_tokens = 46;
  double p_task_emit = 0.25;
  double p_conf_emit = 0.25;
  double p_y1 = 0.5;
  double p_z1 = 0.5;

  void validate() const;

  int usable_vocab() const { return vocab_size - 2; }
  TokenId task_group_begin(int y) const;
  TokenId conf_group_begin(int z) const;
  TokenId noise_group_begin() const;
  int task_group_size() const { return n_task_tokens / 2; }
  int conf_group_size() const { return n_conf_tokens / 2; }
};

struct ConfoundedExample {
  TokenSequence tokens;
  int y = 0;
  int z = 0;
};

struct ConfoundedDataset {
  std::vector<ConfoundedExample> examples;
  double alpha = 1.0;
  GenParams gen_params;
  std::uint64_t seed = 0;

  std::size_t size() const { return examples.size(); }
};

// Solves p1 = alpha * p0 under the marginal constraint
// p_z1 * p1 + (1 - p_z1) * p0 = p_y1. Returns (P(Y=1|Z=0), P(Y=1|Z=1)).
// Throws kInfeasibleAlpha when a conditional would leave [0, 1].
std::pair<double, double> conditional_from_alpha(double alpha, double p_y1,
                                                 double p_z1);

// One sequence: per position, task token of group y w.p. p_task_emit, else
// confounder token of group z w.p. p_conf_emit, else a neutral token.
TokenSequence render_tokens(int y, int z, const GenParams& params, Rng& rng);

ConfoundedDataset sample_dataset(double alpha, int n, const GenParams& params,
                                 std::uint64_t seed);

// k alphas uniformly spaced in log10 with exact endpoints.
std::vector<double> make_test_grid(double a_min, double a_max, int k);

// Line-delimited text format:
//   #HYPD v1 alpha=<decimal> seed=<int> n=<int>
//   y z t1 t2 ... t_seq_len
void save_dataset(const ConfoundedDataset& ds, const std::string& path);
ConfoundedDataset load_dataset(const std::string& path);
void write_dataset(const ConfoundedDataset& ds, std::ostream& out);
ConfoundedDataset read_dataset(std::istream& in);

}  // namespace hypa
