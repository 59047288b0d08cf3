import pytest

HEADER = ("method,model,d,N,seed,replicate,log_z_hat,mean_ess_rel,"
          "resample_count,wall_time_s")


def write_csv(path, rows):
    path.write_text(HEADER + "\n" + "".join(r + "\n" for r in rows))
    return path


@pytest.fixture
def four_row_csv(tmp_path):
    """Hand-checkable fixture: one method, log Z-hat values 1..4.
    Population sigma is sqrt(1.25), mean ESS is 0.25."""
    rows = [f"bpf,lgm,2,64,0,{r},{v},0.{e},50,0.0"
            for r, (v, e) in enumerate(zip([1, 2, 3, 4], [1, 2, 3, 4]))]
    return write_csv(tmp_path / "four.csv", rows)


@pytest.fixture
def six_method_csv(tmp_path):
    rows = []
    for m_i, method in enumerate(["bpf", "fa-apf", "iapf", "tppf-re",
                                  "tppf-ce", "tppf-rece"]):
        for r in range(5):
            rows.append(f"{method},lgm,2,64,0,{r},{-10 - m_i - 0.3 * r},"
                        f"0.5,50,0.0")
    return write_csv(tmp_path / "six.csv", rows)
