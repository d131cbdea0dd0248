import setuptools

setuptools.setup(
    name="trajmoe",
    version="0.1.0",
    description="A trajectory-scoring planner with sparse mixture-of-experts fusion and GRPO fine-tuning",
    license="MIT",
    keywords=["motion planning", "mixture of experts", "trajectory vocabulary", "grpo"],
    long_description=open("README.md", "r").read(),
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests", "benchmarks", "benchmarks.*"]),
    install_requires=["networkx", "numpy", "pandas", "pulp", "pyyaml"],
    entry_points={"console_scripts": ["trajmoe=trajmoe.cli:main"]},
    classifiers=[
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
