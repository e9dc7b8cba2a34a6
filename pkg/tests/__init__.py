"""
テストパッケージ
"""
