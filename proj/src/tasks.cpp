#include "hc/tasks.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <set>

namespace hc::tasks {

using nlohmann::json;

const std::vector<std::string>& default_name_pool() {
    static const std::vector<std::string> pool = {
        "Mary",    "John",   "Tom",    "James",  "Dan",    "Sid",    "Martin", "Kevin",
        "Rachel",  "Claire", "Jessica","Ashley", "Sarah",  "William","Aaron",  "Eric",
        "Paul",    "Jane",   "Kelly",  "Brian",  "Matthew","Anna",   "Alice",  "Jacob",
        "Olivia",  "Amy",    "Scott",  "Andrew", "Laura",  "Jason",  "Emily",  "Peter",
        "Karen",   "Adam",   "Susan",  "Mark",   "Steven", "Lisa",   "Kyle",   "Megan",
        "Jack",    "Emma",   "Luke",   "Sophia", "Ryan",   "Grace",  "Nancy",  "Henry"};
    return pool;
}

const std::vector<std::string>& laundry_object_pool() {
    static const std::vector<std::string> pool = {
        "pencil", "notebook", "pen",     "cup",      "plate",    "jug",     "mug",   "puzzle",
        "textbook", "leash",  "necklace","bracelet", "bottle",   "ball",    "envelope",
        "lighter",  "bowl",   "apple",   "pear",     "banana",   "orange",  "steak"};
    return pool;
}

const std::vector<std::string>& laundry_first_sentence_starts() {
    static const std::vector<std::string> starts = {" Today,", " Tonight,", " Tomorrow,", ""};
    return starts;
}

const std::vector<std::string>& laundry_second_sentence_starts() {
    static const std::vector<std::string> starts = {" First,", "", " When I go,", " I think"};
    return starts;
}

namespace {

// Prompts get the end-of-text token prepended as an attention sink, the
// convention the reported task statistics assume.
int bos_id(const bpe::Tokenizer& tok) {
    const int id = tok.vocab().id_of("<|endoftext|>");
    if (id < 0) throw Error("vocab has no <|endoftext|> token");
    return id;
}

std::vector<int> encode_with_bos(const bpe::Tokenizer& tok, const std::string& text) {
    std::vector<int> ids = tok.encode(text);
    ids.insert(ids.begin(), bos_id(tok));
    return ids;
}

// Token index where `piece` starts when appended to `prefix` (BOS included).
// The piece must begin at a token boundary; generation templates guarantee
// that.
int position_of(const bpe::Tokenizer& tok, const std::string& prefix) {
    return 1 + static_cast<int>(tok.encode(prefix).size());
}

void verify_position(const bpe::Tokenizer& tok, const std::vector<int>& ids, int pos,
                     const std::string& leading_space_word) {
    const std::vector<int> expect = tok.encode(leading_space_word);
    if (expect.size() != 1)
        throw Error("task word is not a single token: '" + leading_space_word + "'");
    if (pos < 0 || pos >= static_cast<int>(ids.size()) ||
        ids[static_cast<size_t>(pos)] != expect[0])
        throw Error("annotated position does not re-tokenize to '" + leading_space_word + "'");
}

std::string fill(std::string tmpl, const std::string& tag, const std::string& value) {
    auto pos = tmpl.find(tag);
    while (pos != std::string::npos) {
        tmpl.replace(pos, tag.size(), value);
        pos = tmpl.find(tag, pos + value.size());
    }
    return tmpl;
}

}  // namespace

std::vector<IoiExample> gen_ioi(const bpe::Tokenizer& tok, int count_per_order, uint64_t seed,
                                const std::vector<std::string>& name_pool,
                                const IoiTemplate& tmpl) {
    std::vector<std::string> usable;
    for (const std::string& name : name_pool)
        if (tok.is_single_token(" " + name)) usable.push_back(name);
    if (usable.size() < 2)
        throw Error("IOI name pool too small after single-token filtering: " +
                    std::to_string(usable.size()));

    std::mt19937_64 rng(seed);
    std::vector<IoiExample> out;
    out.reserve(static_cast<size_t>(count_per_order) * 2);

    auto build = [&](const std::string& io, const std::string& s, bool io_first) {
        IoiExample ex;
        ex.io_name = io;
        ex.s_name = s;
        ex.io_first = io_first;
        const std::string first = io_first ? io : s;
        const std::string second = io_first ? s : io;
        std::string text = fill(tmpl.text, "{first}", " " + first);
        text = fill(text, "{second}", " " + second);
        text = fill(text, "{repeated}", " " + s);
        ex.text = text;
        ex.ids = encode_with_bos(tok, text);
        ex.end_pos = static_cast<int>(ex.ids.size()) - 1;

        const auto first_at = tmpl.text.find("{first}");
        const auto second_at = tmpl.text.find("{second}");
        const auto repeated_at = tmpl.text.find("{repeated}");
        if (first_at == std::string::npos || second_at == std::string::npos ||
            repeated_at == std::string::npos || !(first_at < second_at) ||
            !(second_at < repeated_at))
            throw Error("IOI template must contain {first}, {second}, {repeated} in order");

        const std::string prefix1 = tmpl.text.substr(0, first_at);
        const int p1 = position_of(tok, prefix1);
        std::string prefix2 = fill(tmpl.text.substr(0, second_at), "{first}", " " + first);
        const int p2 = position_of(tok, prefix2);
        std::string prefix3 = fill(tmpl.text.substr(0, repeated_at), "{first}", " " + first);
        prefix3 = fill(prefix3, "{second}", " " + second);
        const int p3 = position_of(tok, prefix3);

        ex.io_pos = io_first ? p1 : p2;
        ex.s1_pos = io_first ? p2 : p1;
        ex.s2_pos = p3;
        ex.answer_id = tok.encode(" " + io)[0];
        ex.s_token_id = tok.encode(" " + s)[0];
        verify_position(tok, ex.ids, ex.io_pos, " " + io);
        verify_position(tok, ex.ids, ex.s1_pos, " " + s);
        verify_position(tok, ex.ids, ex.s2_pos, " " + s);
        return ex;
    };

    for (int i = 0; i < count_per_order; ++i) {
        std::uniform_int_distribution<size_t> pick(0, usable.size() - 1);
        const size_t a = pick(rng);
        size_t b = pick(rng);
        while (b == a) b = pick(rng);
        // 2k: IO-first, 2k+1: its order-swapped minimal pair.
        out.push_back(build(usable[a], usable[b], /*io_first=*/true));
        out.push_back(build(usable[a], usable[b], /*io_first=*/false));
    }
    return out;
}

std::vector<LaundryExample> gen_laundry(const bpe::Tokenizer& tok, int n_objects, int count,
                                        uint64_t seed) {
    const auto& pool = laundry_object_pool();
    if (n_objects < 2 || n_objects > static_cast<int>(pool.size()))
        throw RangeError("laundry N must be in [2, " + std::to_string(pool.size()) + "]");

    std::mt19937_64 rng(seed);
    std::vector<LaundryExample> out;
    out.reserve(static_cast<size_t>(count));

    for (int c = 0; c < count; ++c) {
        LaundryExample ex;
        ex.n_objects = n_objects;

        std::vector<int> pool_idx(pool.size());
        std::iota(pool_idx.begin(), pool_idx.end(), 0);
        std::shuffle(pool_idx.begin(), pool_idx.end(), rng);
        for (int i = 0; i < n_objects; ++i)
            ex.objects.push_back(pool[static_cast<size_t>(pool_idx[static_cast<size_t>(i)])]);

        ex.missing_index =
            static_cast<int>(std::uniform_int_distribution<int>(0, n_objects - 1)(rng));
        for (int i = 0; i < n_objects; ++i)
            if (i != ex.missing_index) ex.second_order.push_back(i);
        std::shuffle(ex.second_order.begin(), ex.second_order.end(), rng);

        const auto& starts1 = laundry_first_sentence_starts();
        const auto& starts2 = laundry_second_sentence_starts();
        const std::string s1 =
            starts1[std::uniform_int_distribution<size_t>(0, starts1.size() - 1)(rng)];
        const std::string s2 =
            starts2[std::uniform_int_distribution<size_t>(0, starts2.size() - 1)(rng)];

        // " Today, I need to buy the pen, the cup and the jug. First, I will
        // buy the cup, then the pen, and finally the" -> " jug"
        std::string text = s1 + " I need to buy";
        ex.first_list_positions.resize(static_cast<size_t>(n_objects));
        for (int i = 0; i < n_objects; ++i) {
            if (i == 0)
                text += " the";
            else if (i == n_objects - 1)
                text += " and the";
            else
                text += ", the";
            ex.first_list_positions[static_cast<size_t>(i)] = position_of(tok, text);
            text += " " + ex.objects[static_cast<size_t>(i)];
        }
        text += ".";
        text += s2 + " I will buy";
        for (size_t k = 0; k < ex.second_order.size(); ++k) {
            if (k == 0)
                text += " the";
            else
                text += ", then the";
            text += " " + ex.objects[static_cast<size_t>(ex.second_order[k])];
        }
        text += ", and finally the";

        ex.text = text;
        ex.ids = encode_with_bos(tok, text);
        ex.end_pos = static_cast<int>(ex.ids.size()) - 1;
        ex.answer_id = tok.encode(" " + ex.objects[static_cast<size_t>(ex.missing_index)])[0];
        for (int i = 0; i < n_objects; ++i)
            verify_position(tok, ex.ids, ex.first_list_positions[static_cast<size_t>(i)],
                            " " + ex.objects[static_cast<size_t>(i)]);
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<DuplicateSeqExample> gen_duplicate_seqs(const bpe::Tokenizer& tok, int length,
                                                    int n_duplicates, int count, uint64_t seed) {
    // Printable pool: ids whose decoded text is pure printable ASCII. Built
    // once per vocab size.
    static std::vector<int> printable_pool;
    static std::mutex pool_mu;
    {
        std::lock_guard<std::mutex> lock(pool_mu);
        if (printable_pool.empty()) {
            for (int id = 0; id < tok.vocab().size(); ++id) {
                if (id == bos_id(tok)) continue;
                const std::string& raw = tok.vocab().token_of(id);
                if (raw.empty()) continue;
                const std::string text = tok.decode({id});
                bool ok = !text.empty();
                for (unsigned char ch : text)
                    if (ch < 0x20 || ch > 0x7e) ok = false;
                if (ok) printable_pool.push_back(id);
            }
        }
    }
    if (length + n_duplicates < 2 || n_duplicates > length)
        throw Error("gen_duplicate_seqs: bad length/duplicate combination");

    std::mt19937_64 rng(seed);
    std::vector<DuplicateSeqExample> out;
    out.reserve(static_cast<size_t>(count));
    for (int c = 0; c < count; ++c) {
        DuplicateSeqExample ex;
        // Distinct base tokens.
        std::vector<int> base;
        std::set<int> used;
        while (static_cast<int>(base.size()) < length) {
            const int id = printable_pool[std::uniform_int_distribution<size_t>(
                0, printable_pool.size() - 1)(rng)];
            if (used.insert(id).second) base.push_back(id);
        }
        ex.ids = base;
        const bool with_bos = true;

        std::vector<int> source_choices(static_cast<size_t>(length));
        std::iota(source_choices.begin(), source_choices.end(), 0);
        std::shuffle(source_choices.begin(), source_choices.end(), rng);

        for (int k = 0; k < n_duplicates; ++k) {
            int src = source_choices[static_cast<size_t>(k)];
            // Current position of that source token (it may have shifted).
            int src_pos = 0;
            for (size_t i = 0; i < ex.ids.size(); ++i)
                if (ex.ids[i] == base[static_cast<size_t>(src)]) {
                    src_pos = static_cast<int>(i);
                    break;
                }
            const int insert_at = std::uniform_int_distribution<int>(
                src_pos + 1, static_cast<int>(ex.ids.size()))(rng);
            ex.ids.insert(ex.ids.begin() + insert_at, base[static_cast<size_t>(src)]);
            for (auto& [s, d] : ex.duplicate_pairs) {
                if (s >= insert_at) ++s;
                if (d >= insert_at) ++d;
            }
            ex.duplicate_pairs.emplace_back(src_pos, insert_at);
        }
        if (with_bos) {
            ex.ids.insert(ex.ids.begin(), bos_id(tok));
            for (auto& [s, d] : ex.duplicate_pairs) {
                ++s;
                ++d;
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

float inhibition_score(const MatrixF& pattern, const IoiExample& ex) {
    if (ex.end_pos >= pattern.rows() || ex.io_pos >= pattern.cols() ||
        ex.s1_pos >= pattern.cols())
        throw RangeError("inhibition_score: annotated positions exceed pattern shape");
    return pattern(ex.end_pos, ex.io_pos) - pattern(ex.end_pos, ex.s1_pos);
}

float inhibition_score_from_final_row(const RowVectorF& final_row, const IoiExample& ex) {
    if (ex.io_pos >= final_row.size() || ex.s1_pos >= final_row.size())
        throw RangeError("inhibition_score: positions exceed row length");
    return final_row(ex.io_pos) - final_row(ex.s1_pos);
}

int attended_index_from_final_row(const RowVectorF& final_row, const LaundryExample& ex) {
    int best = 0;
    float best_mass = -1.f;
    for (size_t i = 0; i < ex.first_list_positions.size(); ++i) {
        const int pos = ex.first_list_positions[i];
        if (pos >= final_row.size()) throw RangeError("attended_index: position out of range");
        if (final_row(pos) > best_mass) {
            best_mass = final_row(pos);
            best = static_cast<int>(i);
        }
    }
    return best;
}

int attended_index(const MatrixF& pattern, const LaundryExample& ex) {
    return attended_index_from_final_row(pattern.row(ex.end_pos), ex);
}

namespace {

template <typename Example>
double accuracy_impl(const runtime::ModelView& model, const std::vector<Example>& dataset) {
    if (dataset.empty()) return 0.0;
    std::vector<int> correct(dataset.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(dataset.size()); ++i) {
        const auto& ex = dataset[static_cast<size_t>(i)];
        const runtime::PrefixRun run(model, ex.ids);
        const RowVectorF logits = run.clean_final_logits();
        Eigen::Index arg = 0;
        logits.maxCoeff(&arg);
        correct[static_cast<size_t>(i)] = (static_cast<int>(arg) == ex.answer_id) ? 1 : 0;
    }
    double n = 0;
    for (int c : correct) n += c;
    return n / static_cast<double>(dataset.size());
}

}  // namespace

double task_accuracy(const runtime::ModelView& model, const std::vector<LaundryExample>& dataset) {
    return accuracy_impl(model, dataset);
}
double task_accuracy(const runtime::ModelView& model, const std::vector<IoiExample>& dataset) {
    return accuracy_impl(model, dataset);
}

double accuracy_from_predictions(const std::vector<int>& predictions,
                                 const std::vector<LaundryExample>& dataset) {
    if (predictions.size() != dataset.size())
        throw ShapeError("one prediction per example required");
    if (dataset.empty()) return 0.0;
    double n = 0;
    for (size_t i = 0; i < dataset.size(); ++i)
        n += predictions[i] == dataset[i].answer_id ? 1 : 0;
    return n / static_cast<double>(dataset.size());
}

SeparabilityResult separability(
    const std::vector<std::pair<Eigen::Vector2f, bool>>& projections) {
    size_t pos = 0;
    for (const auto& [p, label] : projections) pos += label ? 1 : 0;
    if (pos == 0 || pos == projections.size())
        throw Error("separability: both classes required");

    // Stratified split: within each class, members alternate between the
    // train and holdout halves, so both splits keep the class balance
    // regardless of input order.
    std::vector<size_t> train_idx, hold_idx;
    size_t seen_pos = 0, seen_neg = 0;
    for (size_t i = 0; i < projections.size(); ++i) {
        size_t& seen = projections[i].second ? seen_pos : seen_neg;
        (seen % 2 == 0 ? train_idx : hold_idx).push_back(i);
        ++seen;
    }
    if (train_idx.empty() || hold_idx.empty())
        throw Error("separability: need at least two points");

    double best_train = -1.0;
    double best_angle = 0.0, best_threshold = 0.0;
    int best_sign = 1;
    std::vector<float> proj(train_idx.size());
    for (int deg = 0; deg < 180; ++deg) {
        const double rad = deg * M_PI / 180.0;
        const Eigen::Vector2f dir(static_cast<float>(std::cos(rad)),
                                  static_cast<float>(std::sin(rad)));
        std::vector<std::pair<float, bool>> pts(train_idx.size());
        for (size_t k = 0; k < train_idx.size(); ++k) {
            const auto& [p, label] = projections[train_idx[k]];
            pts[k] = {p.dot(dir), label};
        }
        std::sort(pts.begin(), pts.end());
        // Candidate thresholds: midpoints between consecutive projections.
        size_t pos_right = 0;
        for (const auto& [v, l] : pts) pos_right += l ? 1 : 0;
        size_t pos_left = 0, neg_left = 0;
        auto consider = [&](double threshold) {
            const size_t neg_right = (pts.size() - pos_left - neg_left) - pos_right;
            const size_t correct_pos_sign = neg_left + pos_right;   // positives above
            const size_t correct_neg_sign = pos_left + neg_right;   // positives below
            const double acc = static_cast<double>(std::max(correct_pos_sign, correct_neg_sign)) /
                               static_cast<double>(pts.size());
            if (acc > best_train) {
                best_train = acc;
                best_angle = deg;
                best_threshold = threshold;
                best_sign = correct_pos_sign >= correct_neg_sign ? 1 : -1;
            }
        };
        consider(pts.front().first - 1.0);
        for (size_t k = 0; k < pts.size(); ++k) {
            if (pts[k].second) {
                --pos_right;
                ++pos_left;
            } else {
                ++neg_left;
            }
            const double threshold = k + 1 < pts.size()
                                         ? 0.5 * (pts[k].first + pts[k + 1].first)
                                         : pts[k].first + 1.0;
            consider(threshold);
        }
    }

    SeparabilityResult res;
    res.angle_degrees = best_angle;
    res.threshold = best_threshold;
    const double rad = best_angle * M_PI / 180.0;
    const Eigen::Vector2f dir(static_cast<float>(std::cos(rad)),
                              static_cast<float>(std::sin(rad)));
    size_t correct = 0, hold_pos = 0;
    for (size_t i : hold_idx) {
        const auto& [p, label] = projections[i];
        const bool above = p.dot(dir) > best_threshold;
        const bool predicted = best_sign > 0 ? above : !above;
        correct += predicted == label ? 1 : 0;
        hold_pos += label ? 1 : 0;
    }
    res.holdout_accuracy = static_cast<double>(correct) / static_cast<double>(hold_idx.size());
    res.majority_baseline =
        std::max(hold_pos, hold_idx.size() - hold_pos) / static_cast<double>(hold_idx.size());
    return res;
}

std::string to_jsonl(const std::vector<IoiExample>& v) {
    std::string out;
    for (const IoiExample& ex : v) {
        json j;
        j["text"] = ex.text;
        j["io_name"] = ex.io_name;
        j["s_name"] = ex.s_name;
        j["io_first"] = ex.io_first;
        j["io_pos"] = ex.io_pos;
        j["s1_pos"] = ex.s1_pos;
        j["s2_pos"] = ex.s2_pos;
        j["end_pos"] = ex.end_pos;
        j["answer_id"] = ex.answer_id;
        j["ids"] = ex.ids;
        out += j.dump() + "\n";
    }
    return out;
}

std::string to_jsonl(const std::vector<LaundryExample>& v) {
    std::string out;
    for (const LaundryExample& ex : v) {
        json j;
        j["text"] = ex.text;
        j["n_objects"] = ex.n_objects;
        j["objects"] = ex.objects;
        j["missing_index"] = ex.missing_index;
        j["second_order"] = ex.second_order;
        j["first_list_positions"] = ex.first_list_positions;
        j["answer_id"] = ex.answer_id;
        j["end_pos"] = ex.end_pos;
        j["ids"] = ex.ids;
        out += j.dump() + "\n";
    }
    return out;
}

std::string to_jsonl(const std::vector<DuplicateSeqExample>& v) {
    std::string out;
    for (const DuplicateSeqExample& ex : v) {
        json j;
        j["ids"] = ex.ids;
        json pairs = json::array();
        for (const auto& [s, d] : ex.duplicate_pairs) pairs.push_back({s, d});
        j["duplicate_pairs"] = pairs;
        out += j.dump() + "\n";
    }
    return out;
}

}  // namespace hc::tasks
