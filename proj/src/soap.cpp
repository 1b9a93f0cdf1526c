#include "prunevolve/soap.hpp"

namespace prunevolve {

namespace {

NamedFunction fn(std::string name, NamedFunction::Family family, std::string_view text) {
  return NamedFunction{std::move(name), family, parse_tree(text)};
}

std::vector<NamedFunction> build_soap() {
  using F = NamedFunction::Family;
  std::vector<NamedFunction> v;
  v.push_back(fn("filter_l1", F::soap, "(sum_g (abs W_I))"));
  v.push_back(fn("filter_l2", F::soap, "(sqrt (sum_g (sq W_I)))"));
  v.push_back(fn("bn_scale", F::soap, "(abs (slice B))"));
  v.push_back(fn("geo_median", F::soap, "(sqrt (sum_g (sq (sub W_I (geo W)))))"));
  // Discriminant strength of the class partition: n+ * d' inv(S) d with d the
  // class-mean offset and S the ridged total scatter of the maps.
  v.push_back(fn("discriminant_info", F::soap,
                 "(mul (count_s F+)"
                 " (matmul (matmul (tran (sub (mean_s F+) (mean_s F)))"
                 " (inv (ridge (matmul (tran (sub F (mean_s F))) (sub F (mean_s F))))))"
                 " (sub (mean_s F+) (mean_s F))))"));
  // Biased two-sample kernel statistic; the cross term enters twice.
  v.push_back(fn("mmd", F::soap,
                 "(sub (sub (add (div (sum_g (rbf F+ F+)) (sq (count_s F+)))"
                 " (div (sum_g (rbf F- F-)) (sq (count_s F-))))"
                 " (div (sum_g (rbf F+ F-)) (mul (count_s F+) (count_s F-))))"
                 " (div (sum_g (rbf F+ F-)) (mul (count_s F+) (count_s F-))))"));
  v.push_back(fn("abs_snr", F::soap,
                 "(div (abs (sub (mean_g F+) (mean_g F-))) (add (std_g F+) (std_g F-)))"));
  v.push_back(fn("t_test", F::soap,
                 "(div (abs (sub (mean_g F+) (mean_g F-)))"
                 " (sqrt (add (div (var_g F+) (count_s F+)) (div (var_g F-) (count_s F-)))))"));
  v.push_back(fn("fisher_ratio", F::soap,
                 "(div (sq (sub (mean_g F+) (mean_g F-))) (add (var_g F+) (var_g F-)))"));
  v.push_back(fn("sym_divergence", F::soap,
                 "(add (add (div (var_g F+) (var_g F-)) (div (var_g F-) (var_g F+)))"
                 " (div (sq (sub (mean_g F+) (mean_g F-))) (add (var_g F+) (var_g F-))))"));
  return v;
}

std::vector<NamedFunction> build_evolved() {
  using F = NamedFunction::Family;
  std::vector<NamedFunction> v;
  // Variance-ratio pair plus a scaled-mean-map residual norm.
  v.push_back(fn("evolved_main", F::evolved,
                 "(add (add (div (var_g F-) (var_g F+)) (div (var_g F+) (var_g F-)))"
                 " (div (dot (add (mul (mul (std_g (mean_s F)) (var_g F-)) (mean_s F))"
                 " (sub (var_g F+) (mean_g F-)))"
                 " (add (mul (mul (std_g (mean_s F)) (var_g F-)) (mean_s F))"
                 " (sub (var_g F+) (mean_g F-))))"
                 " (add (var_g F+) (var_g F-))))"));
  // Needs square maps: uses the per-map trace of the positive partition.
  v.push_back(fn("evolved_trace", F::evolved,
                 "(div (sq (sq (div (var_g (mean_s F+)) (mul (std_g (tr F+)) (mean_g F-)))))"
                 " (var_g (sqrt F)))"));
  v.push_back(fn("evolved_snr", F::evolved,
                 "(add (div (dot (sub (mean_s F) (var_g F-)) (sub (mean_s F) (var_g F-)))"
                 " (add (var_g F+) (var_g F-))) (var_g F+))"));
  v.push_back(fn("evolved_partition_var", F::evolved, "(var_g F+)"));
  v.push_back(fn("evolved_filter_var", F::evolved, "(var_g W_I)"));
  return v;
}

}  // namespace

const std::vector<NamedFunction>& soap_functions() {
  static const std::vector<NamedFunction> v = build_soap();
  return v;
}

const std::vector<NamedFunction>& evolved_functions() {
  static const std::vector<NamedFunction> v = build_evolved();
  return v;
}

const std::vector<NamedFunction>& function_library() {
  static const std::vector<NamedFunction> v = [] {
    std::vector<NamedFunction> all = soap_functions();
    const auto& e = evolved_functions();
    all.insert(all.end(), e.begin(), e.end());
    return all;
  }();
  return v;
}

const NamedFunction* find_function(std::string_view name) {
  for (const NamedFunction& f : function_library())
    if (f.name == name) return &f;
  return nullptr;
}

}  // namespace prunevolve
