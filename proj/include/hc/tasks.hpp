#pragma once

#include "hc/common.hpp"
#include "hc/runtime.hpp"
#include "hc/tokenizer.hpp"

#include <random>
#include <string>
#include <vector>

namespace hc::tasks {

// "Then, {A} and {B} went to the store. {S} gave a drink to" with the
// repeated name S equal to A (S1-first) or B (IO-first). The gold answer is
// the non-repeated (IO) name.
struct IoiExample {
    std::string text;
    std::string io_name, s_name;  // without leading space
    bool io_first = false;
    int io_pos = -1, s1_pos = -1, s2_pos = -1, end_pos = -1;
    int answer_id = -1;      // token id of " " + io_name
    int s_token_id = -1;     // token id of " " + s_name
    std::vector<int> ids;
};

struct IoiTemplate {
    // Placeholders: {first} {second} (sentence-1 names, in order) and
    // {repeated} (the subject, sentence 2). Substituted names carry their
    // leading space, so the template omits the space before each placeholder.
    std::string text = "Then,{first} and{second} went to the store.{repeated} gave a drink to";
};

// Leave-one-out list recall: N objects, then the other N-1 in shuffled
// order; the model must produce the held-out object after "finally the".
struct LaundryExample {
    int n_objects = 0;
    std::vector<std::string> objects;       // sentence-1 order
    int missing_index = -1;                 // index into `objects`
    std::vector<int> second_order;          // indices into `objects`, shuffled
    std::vector<int> first_list_positions;  // token position of each object
    int answer_id = -1;
    int end_pos = -1;
    std::string text;
    std::vector<int> ids;
};

struct DuplicateSeqExample {
    std::vector<int> ids;
    // (source position, copy position), source strictly earlier.
    std::vector<std::pair<int, int>> duplicate_pairs;
};

// Built-in pools. Names are filtered to single-token leading-space forms at
// generation time; the laundry pool is fixed.
const std::vector<std::string>& default_name_pool();
const std::vector<std::string>& laundry_object_pool();
const std::vector<std::string>& laundry_first_sentence_starts();
const std::vector<std::string>& laundry_second_sentence_starts();

// count_per_order examples for each of IO-first and S1-first. Examples 2k and
// 2k+1 form an order-swapped minimal pair over the same name pair.
std::vector<IoiExample> gen_ioi(const bpe::Tokenizer& tok, int count_per_order, uint64_t seed,
                                const std::vector<std::string>& name_pool = default_name_pool(),
                                const IoiTemplate& tmpl = {});

std::vector<LaundryExample> gen_laundry(const bpe::Tokenizer& tok, int n_objects, int count,
                                        uint64_t seed);

std::vector<DuplicateSeqExample> gen_duplicate_seqs(const bpe::Tokenizer& tok, int length,
                                                    int n_duplicates, int count, uint64_t seed);

// Mover-head preference for the IO token over S1: pattern[END, IO] -
// pattern[END, S1], in [-1, 1].
float inhibition_score(const MatrixF& pattern, const IoiExample& ex);
float inhibition_score_from_final_row(const RowVectorF& final_row, const IoiExample& ex);

// argmax over first-list object positions of the mover head's final-row
// attention.
int attended_index(const MatrixF& pattern, const LaundryExample& ex);
int attended_index_from_final_row(const RowVectorF& final_row, const LaundryExample& ex);

// Fraction of examples whose greedy next token equals the answer. Runs the
// clean model; parallel over examples.
double task_accuracy(const runtime::ModelView& model, const std::vector<LaundryExample>& dataset);
double task_accuracy(const runtime::ModelView& model, const std::vector<IoiExample>& dataset);

// Accuracy of precomputed predictions (one per example) against the answers.
double accuracy_from_predictions(const std::vector<int>& predictions,
                                 const std::vector<LaundryExample>& dataset);

struct SeparabilityResult {
    double holdout_accuracy = 0;
    double majority_baseline = 0;  // on the holdout split
    double angle_degrees = 0;
    double threshold = 0;
};

// Best linear separator over 2-D projections by exhaustive 1-degree angle +
// threshold search on even-indexed points, scored on the odd-indexed holdout.
SeparabilityResult separability(
    const std::vector<std::pair<Eigen::Vector2f, bool>>& projections);

// JSON-lines serialization, one example per line.
std::string to_jsonl(const std::vector<IoiExample>& v);
std::string to_jsonl(const std::vector<LaundryExample>& v);
std::string to_jsonl(const std::vector<DuplicateSeqExample>& v);

}  // namespace hc::tasks
