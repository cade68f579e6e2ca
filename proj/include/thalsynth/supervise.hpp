#pragma once

// Label taxonomy, fusion of candidate segmentations into soft targets, the
// composite soft-Dice loss and multi-granularity hard Dice.

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "thalsynth/errors.hpp"
#include "thalsynth/volgrid.hpp"

namespace thalsynth {

enum class Hemisphere { Left, Right };

struct FineLabel {
  std::int32_t id = 0;
  std::string name;
  std::string nucleus;  // shared by the left and right member of a pair
  Hemisphere hemisphere = Hemisphere::Left;
  int manual_group = 0;   // 1-based
  int nuclear_group = 0;  // 1-based
};

// Channel c of a ProbVolume holds label labels()[c-1]; channel 0 is background.
class LabelTaxonomy {
 public:
  LabelTaxonomy() = default;

  explicit LabelTaxonomy(std::vector<FineLabel> labels) : labels_(std::move(labels)) {
    if (labels_.empty()) throw InvalidInputError("taxonomy: no labels");
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      const auto& l = labels_[i];
      if (l.id == 0) throw InvalidInputError("taxonomy: label id 0 is reserved for background");
      if (!channel_of_.emplace(l.id, static_cast<int>(i) + 1).second) {
        throw InvalidInputError("taxonomy: duplicate label id " + std::to_string(l.id));
      }
    }
    manual_ = build_partition(&FineLabel::manual_group, "manual");
    nuclear_ = build_partition(&FineLabel::nuclear_group, "nuclear");

    std::map<std::string, std::vector<int>> by_nucleus;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      auto& members = by_nucleus[labels_[i].nucleus];
      if (members.empty()) order.push_back(labels_[i].nucleus);
      members.push_back(static_cast<int>(i) + 1);
    }
    for (const auto& name : order) {
      const auto& members = by_nucleus[name];
      if (members.size() > 2) throw InvalidInputError("taxonomy: nucleus '" + name + "' has more than two labels");
      if (members.size() == 2 && labels_[static_cast<std::size_t>(members[0] - 1)].hemisphere ==
                                     labels_[static_cast<std::size_t>(members[1] - 1)].hemisphere) {
        throw InvalidInputError("taxonomy: nucleus '" + name + "' pairs two labels of the same hemisphere");
      }
      nucleus_names_.push_back(name);
      nuclei_.push_back(members);
    }
  }

  const std::vector<FineLabel>& labels() const { return labels_; }
  int num_labels() const { return static_cast<int>(labels_.size()); }
  int num_channels() const { return num_labels() + 1; }

  // Channel for a label id; background (0) maps to channel 0.
  int channel_of(std::int32_t id) const {
    if (id == 0) return 0;
    auto it = channel_of_.find(id);
    if (it == channel_of_.end()) throw InvalidInputError("label " + std::to_string(id) + " is not in the taxonomy");
    return it->second;
  }

  bool contains(std::int32_t id) const { return id == 0 || channel_of_.count(id) != 0; }

  std::int32_t id_of_channel(int channel) const {
    return channel == 0 ? 0 : labels_[static_cast<std::size_t>(channel - 1)].id;
  }

  // Each inner list holds the channels of one group, groups in id order.
  const std::vector<std::vector<int>>& manual_groups() const { return manual_; }
  const std::vector<std::vector<int>>& nuclear_groups() const { return nuclear_; }
  // Left/right pairs (or singletons) of channels, in first-appearance order.
  const std::vector<std::vector<int>>& nuclei() const { return nuclei_; }
  const std::vector<std::string>& nucleus_names() const { return nucleus_names_; }

  // Channel -> 1-based manual group (0 for background).
  int manual_group_of_channel(int channel) const {
    return channel == 0 ? 0 : labels_[static_cast<std::size_t>(channel - 1)].manual_group;
  }

  // Plain-text form: one label per line,
  //   id  name  nucleus  hemisphere(L|R)  manual_group  nuclear_group
  // Blank lines and lines starting with '#' are ignored.
  static LabelTaxonomy parse(std::istream& in, const std::string& source = "taxonomy") {
    std::vector<FineLabel> labels;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      std::istringstream ss(line);
      FineLabel l;
      std::string hemi;
      if (!(ss >> l.id >> l.name >> l.nucleus >> hemi >> l.manual_group >> l.nuclear_group)) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'id name nucleus L|R manual nuclear'");
      }
      if (hemi == "L" || hemi == "l") {
        l.hemisphere = Hemisphere::Left;
      } else if (hemi == "R" || hemi == "r") {
        l.hemisphere = Hemisphere::Right;
      } else {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": hemisphere must be L or R");
      }
      labels.push_back(std::move(l));
    }
    try {
      return LabelTaxonomy(std::move(labels));
    } catch (const InvalidInputError& e) {
      throw ConfigError(source + ": " + e.what());
    }
  }

  static LabelTaxonomy load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open taxonomy file '" + path + "'");
    return parse(in, path);
  }

  std::string serialize() const {
    std::ostringstream out;
    out << "# id\tname\tnucleus\themisphere\tmanual_group\tnuclear_group\n";
    for (const auto& l : labels_) {
      out << l.id << '\t' << l.name << '\t' << l.nucleus << '\t' << (l.hemisphere == Hemisphere::Left ? 'L' : 'R')
          << '\t' << l.manual_group << '\t' << l.nuclear_group << '\n';
    }
    return out.str();
  }

 private:
  std::vector<std::vector<int>> build_partition(int FineLabel::*field, const char* what) const {
    int max_group = 0;
    for (const auto& l : labels_) {
      if (l.*field < 1) throw InvalidInputError(std::string("taxonomy: label ") + std::to_string(l.id) + " has no " + what + " group");
      max_group = std::max(max_group, l.*field);
    }
    std::vector<std::vector<int>> groups(static_cast<std::size_t>(max_group));
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      groups[static_cast<std::size_t>(labels_[i].*field - 1)].push_back(static_cast<int>(i) + 1);
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (groups[g].empty()) {
        throw InvalidInputError(std::string("taxonomy: ") + what + " group " + std::to_string(g + 1) + " is empty");
      }
    }
    return groups;
  }

  std::vector<FineLabel> labels_;
  std::map<std::int32_t, int> channel_of_;
  std::vector<std::vector<int>> manual_;
  std::vector<std::vector<int>> nuclear_;
  std::vector<std::vector<int>> nuclei_;
  std::vector<std::string> nucleus_names_;
};

// ---------------------------------------------------------------------------
// Target fusion

// (i) average the one-hot encodings of the candidates; (ii) keep only the
// labels of the most probable manual group (background is group 0, ties go to
// the lower group) and renormalise.
inline ProbVolume fuse_targets(std::span<const LabelVolume> candidates, const LabelTaxonomy& tax) {
  if (candidates.empty()) throw InvalidInputError("fuse_targets: no candidate segmentations");
  const VoxelGrid& grid = candidates.front().grid();
  for (const auto& c : candidates) require_same_grid(grid, c.grid(), "fuse_targets");

  const int nch = tax.num_channels();
  const int ngroups = static_cast<int>(tax.manual_groups().size()) + 1;
  std::vector<int> group_of(static_cast<std::size_t>(nch));
  for (int c = 0; c < nch; ++c) group_of[static_cast<std::size_t>(c)] = tax.manual_group_of_channel(c);

  ProbVolume out(grid, nch);
  std::vector<int> votes(static_cast<std::size_t>(nch));
  std::vector<int> group_votes(static_cast<std::size_t>(ngroups));
  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto& c : candidates) ++votes[static_cast<std::size_t>(tax.channel_of(c.at(v)))];
    std::fill(group_votes.begin(), group_votes.end(), 0);
    for (int c = 0; c < nch; ++c) group_votes[static_cast<std::size_t>(group_of[static_cast<std::size_t>(c)])] += votes[static_cast<std::size_t>(c)];
    // Integer vote counts keep the argmax exact.
    const int winner = static_cast<int>(std::max_element(group_votes.begin(), group_votes.end()) - group_votes.begin());
    const double kept = group_votes[static_cast<std::size_t>(winner)];
    auto dst = out.voxel(v);
    for (int c = 0; c < nch; ++c) {
      const bool in_winner = group_of[static_cast<std::size_t>(c)] == winner;
      // Renormalising within the winning group: (votes/n) / (kept/n).
      dst[c] = in_winner ? static_cast<float>(votes[static_cast<std::size_t>(c)] / kept) : 0.0f;
    }
  }
  return out;
}

// Step (i) only: the averaged one-hot encoding.
inline ProbVolume average_one_hot(std::span<const LabelVolume> candidates, const LabelTaxonomy& tax) {
  if (candidates.empty()) throw InvalidInputError("average_one_hot: no candidate segmentations");
  const VoxelGrid& grid = candidates.front().grid();
  for (const auto& c : candidates) require_same_grid(grid, c.grid(), "average_one_hot");
  ProbVolume out(grid, tax.num_channels());
  const auto n = static_cast<double>(candidates.size());
  std::vector<int> votes(static_cast<std::size_t>(tax.num_channels()));
  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto& c : candidates) ++votes[static_cast<std::size_t>(tax.channel_of(c.at(v)))];
    auto dst = out.voxel(v);
    for (int c = 0; c < tax.num_channels(); ++c) dst[c] = static_cast<float>(votes[static_cast<std::size_t>(c)] / n);
  }
  return out;
}

inline ProbVolume one_hot(const LabelVolume& labels, const LabelTaxonomy& tax) {
  ProbVolume out(labels.grid(), tax.num_channels());
  for (std::size_t v = 0; v < labels.voxel_count(); ++v) out.at(v, tax.channel_of(labels.at(v))) = 1.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Soft Dice

// 2 sum(x y) / (sum(x^2) + sum(y^2)); two empty maps agree perfectly.
inline double soft_dice(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidInputError("soft_dice: size mismatch");
  double xy = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xy += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  const double den = xx + yy;
  return den == 0.0 ? 1.0 : 2.0 * xy / den;
}

// Per-voxel sum of the listed channels.
template <typename T, typename Tag>
std::vector<double> channel_sum(const Volume<T, Tag>& p, std::span<const int> channels) {
  std::vector<double> out(p.voxel_count(), 0.0);
  for (std::size_t v = 0; v < p.voxel_count(); ++v) {
    double s = 0.0;
    for (int c : channels) s += static_cast<double>(p.at(v, c));
    out[v] = s;
  }
  return out;
}

template <typename T, typename Tag>
std::vector<double> channel_values(const Volume<T, Tag>& p, int channel) {
  const int c[1] = {channel};
  return channel_sum(p, c);
}

struct LossOptions {
  // The first sum runs over l = 0..L; clearing this starts it at 1.
  bool include_background = true;
};

struct LossBreakdown {
  double label_dice_sum = 0.0;
  double group_dice_sum = 0.0;
  double whole_dice = 0.0;
  double total = 0.0;  // -(label + group + whole)
  std::vector<double> label_dice;
  std::vector<double> group_dice;
};

inline void require_loss_inputs(const ProbVolume& pred, const ProbVolume& target, const LabelTaxonomy& tax) {
  if (pred.components() != tax.num_channels() || target.components() != tax.num_channels()) {
    throw InvalidInputError("composite_loss: volumes have " + std::to_string(pred.components()) + "/" +
                            std::to_string(target.components()) + " channels, taxonomy expects " +
                            std::to_string(tax.num_channels()));
  }
  if (pred.voxel_count() != target.voxel_count()) throw GridMismatchError("composite_loss: voxel counts differ");
}

inline std::vector<int> foreground_channels(const LabelTaxonomy& tax) {
  std::vector<int> fg(static_cast<std::size_t>(tax.num_labels()));
  for (int c = 1; c <= tax.num_labels(); ++c) fg[static_cast<std::size_t>(c - 1)] = c;
  return fg;
}

inline LossBreakdown composite_loss(const ProbVolume& pred, const ProbVolume& target, const LabelTaxonomy& tax,
                                    const LossOptions& opts = {}) {
  require_loss_inputs(pred, target, tax);
  LossBreakdown b;
  for (int c = opts.include_background ? 0 : 1; c < tax.num_channels(); ++c) {
    b.label_dice.push_back(soft_dice(channel_values(pred, c), channel_values(target, c)));
    b.label_dice_sum += b.label_dice.back();
  }
  for (const auto& g : tax.manual_groups()) {
    b.group_dice.push_back(soft_dice(channel_sum(pred, g), channel_sum(target, g)));
    b.group_dice_sum += b.group_dice.back();
  }
  const std::vector<int> fg = foreground_channels(tax);
  b.whole_dice = soft_dice(channel_sum(pred, fg), channel_sum(target, fg));
  b.total = -(b.label_dice_sum + b.group_dice_sum + b.whole_dice);
  return b;
}

namespace detail {

// d SDC / d x_i = 2 y_i / Q - 4 P x_i / Q^2 with P = sum xy, Q = sum x^2 + y^2.
inline std::vector<double> soft_dice_gradient(std::span<const double> x, std::span<const double> y) {
  double xy = 0.0, q = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xy += x[i] * y[i];
    q += x[i] * x[i] + y[i] * y[i];
  }
  std::vector<double> g(x.size(), 0.0);
  if (q == 0.0) return g;
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = 2.0 * y[i] / q - 4.0 * xy * x[i] / (q * q);
  return g;
}

}  // namespace detail

// Gradient of composite_loss with respect to every entry of `pred`, in the
// same voxel-major layout as the volume data.
inline std::vector<double> composite_loss_gradient(const ProbVolume& pred, const ProbVolume& target,
                                                   const LabelTaxonomy& tax, const LossOptions& opts = {}) {
  require_loss_inputs(pred, target, tax);
  const int nch = tax.num_channels();
  const std::size_t nv = pred.voxel_count();
  std::vector<double> grad(nv * static_cast<std::size_t>(nch), 0.0);
  auto add = [&](int channel, const std::vector<double>& g) {
    for (std::size_t v = 0; v < nv; ++v) grad[v * static_cast<std::size_t>(nch) + static_cast<std::size_t>(channel)] -= g[v];
  };
  for (int c = opts.include_background ? 0 : 1; c < nch; ++c) {
    add(c, detail::soft_dice_gradient(channel_values(pred, c), channel_values(target, c)));
  }
  for (const auto& grp : tax.manual_groups()) {
    const auto g = detail::soft_dice_gradient(channel_sum(pred, grp), channel_sum(target, grp));
    for (int c : grp) add(c, g);
  }
  const std::vector<int> fg = foreground_channels(tax);
  const auto g = detail::soft_dice_gradient(channel_sum(pred, fg), channel_sum(target, fg));
  for (int c : fg) add(c, g);
  return grad;
}

// Output channel g (1-based) sums the member channels of group g; channel 0
// passes through.
inline ProbVolume group_project(const ProbVolume& p, const std::vector<std::vector<int>>& grouping) {
  ProbVolume out(p.grid(), static_cast<int>(grouping.size()) + 1);
  for (std::size_t v = 0; v < p.voxel_count(); ++v) {
    const auto src = p.voxel(v);
    auto dst = out.voxel(v);
    dst[0] = src[0];
    for (std::size_t g = 0; g < grouping.size(); ++g) {
      double s = 0.0;
      for (int c : grouping[g]) s += static_cast<double>(src[c]);
      dst[g + 1] = static_cast<float>(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hard Dice at several granularities

struct DiceEntry {
  std::string label;
  double dice = 0.0;
};

struct GranularityReport {
  std::string granularity;
  std::vector<DiceEntry> entries;  // labels present in either volume
  double mean = 0.0;               // NaN if no label is present
};

struct DiceReport {
  std::vector<GranularityReport> granularities;  // hist, manual, nuclear, whole

  const GranularityReport& at(const std::string& name) const {
    for (const auto& g : granularities) {
      if (g.granularity == name) return g;
    }
    throw InvalidInputError("dice report has no granularity '" + name + "'");
  }
};

namespace detail {

struct OverlapCounts {
  std::vector<double> a, b, both;
  explicit OverlapCounts(std::size_t n) : a(n, 0.0), b(n, 0.0), both(n, 0.0) {}

  void add(int ka, int kb) {
    if (ka > 0) a[static_cast<std::size_t>(ka)] += 1;
    if (kb > 0) b[static_cast<std::size_t>(kb)] += 1;
    if (ka > 0 && ka == kb) both[static_cast<std::size_t>(ka)] += 1;
  }

  bool present(std::size_t k) const { return a[k] + b[k] > 0; }
  double dice(std::size_t k) const { return 2.0 * both[k] / (a[k] + b[k]); }
};

inline GranularityReport finish(std::string name, std::vector<DiceEntry> entries) {
  GranularityReport r{std::move(name), std::move(entries), std::numeric_limits<double>::quiet_NaN()};
  if (!r.entries.empty()) {
    double s = 0.0;
    for (const auto& e : r.entries) s += e.dice;
    r.mean = s / static_cast<double>(r.entries.size());
  }
  return r;
}

inline GranularityReport group_report(std::string name, const OverlapCounts& counts, const char* prefix) {
  std::vector<DiceEntry> entries;
  for (std::size_t g = 1; g < counts.a.size(); ++g) {
    if (counts.present(g)) entries.push_back({std::string(prefix) + std::to_string(g), counts.dice(g)});
  }
  return finish(std::move(name), std::move(entries));
}

}  // namespace detail

inline DiceReport hard_dice_report(const LabelVolume& a, const LabelVolume& b, const LabelTaxonomy& tax) {
  require_same_grid(a.grid(), b.grid(), "hard_dice_report");
  const auto nch = static_cast<std::size_t>(tax.num_channels());
  detail::OverlapCounts fine(nch), manual(tax.manual_groups().size() + 1), nuclear(tax.nuclear_groups().size() + 1),
      whole(2);
  std::vector<int> manual_of(nch, 0), nuclear_of(nch, 0);
  for (std::size_t c = 1; c < nch; ++c) {
    manual_of[c] = tax.labels()[c - 1].manual_group;
    nuclear_of[c] = tax.labels()[c - 1].nuclear_group;
  }
  for (std::size_t v = 0; v < a.voxel_count(); ++v) {
    const auto ca = static_cast<std::size_t>(tax.channel_of(a.at(v)));
    const auto cb = static_cast<std::size_t>(tax.channel_of(b.at(v)));
    fine.add(static_cast<int>(ca), static_cast<int>(cb));
    manual.add(manual_of[ca], manual_of[cb]);
    nuclear.add(nuclear_of[ca], nuclear_of[cb]);
    whole.add(ca > 0 ? 1 : 0, cb > 0 ? 1 : 0);
  }

  DiceReport report;
  // Left/right Dice of each nucleus are averaged over the hemispheres where
  // the label is present.
  std::vector<DiceEntry> hist;
  for (std::size_t n = 0; n < tax.nuclei().size(); ++n) {
    double s = 0.0;
    int present = 0;
    for (int c : tax.nuclei()[n]) {
      if (fine.present(static_cast<std::size_t>(c))) {
        s += fine.dice(static_cast<std::size_t>(c));
        ++present;
      }
    }
    if (present > 0) hist.push_back({tax.nucleus_names()[n], s / present});
  }
  report.granularities.push_back(detail::finish("hist", std::move(hist)));
  report.granularities.push_back(detail::group_report("manual", manual, "manual_"));
  report.granularities.push_back(detail::group_report("nuclear", nuclear, "nuclear_"));
  std::vector<DiceEntry> w;
  if (whole.present(1)) w.push_back({"thalamus", whole.dice(1)});
  report.granularities.push_back(detail::finish("whole", std::move(w)));
  return report;
}

// One tab-separated record per label per granularity, then one mean record
// per granularity.
inline std::string format_dice_report(const DiceReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << "granularity\tlabel\tdice\n";
  for (const auto& g : r.granularities) {
    for (const auto& e : g.entries) out << g.granularity << '\t' << e.label << '\t' << e.dice << '\n';
  }
  for (const auto& g : r.granularities) out << g.granularity << "\tmean\t" << g.mean << '\n';
  return out.str();
}

}  // namespace thalsynth
